//! On-disk datasets: `manifest.tsv` plus one binary PGM (or PPM for three
//! channels) per sample under `img/`.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{corrupt, render, Corruption, ImageShape, TextImage};
use super::SynthError;
use crate::textcodec::Charset;

pub const MANIFEST: &str = "manifest.tsv";
pub const IMAGE_DIR: &str = "img";

/// Fractions of samples receiving each corruption kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionMix {
    pub clean: f64,
    pub occluded: f64,
    pub blurred: f64,
    pub noisy: f64,
}

impl Default for CorruptionMix {
    fn default() -> Self {
        Self { clean: 0.7, occluded: 0.1, blurred: 0.1, noisy: 0.1 }
    }
}

impl CorruptionMix {
    pub const CLEAN: CorruptionMix = CorruptionMix { clean: 1.0, occluded: 0.0, blurred: 0.0, noisy: 0.0 };

    /// Parses `clean=0.7,occluded=0.1,...`; omitted kinds are zero. The
    /// fractions must sum to 1 within `1e-6`.
    pub fn parse(s: &str) -> Result<Self, SynthError> {
        let mut mix = CorruptionMix { clean: 0.0, occluded: 0.0, blurred: 0.0, noisy: 0.0 };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| SynthError::BadMix(format!("expected key=value, got {part:?}")))?;
            let v: f64 = v.trim().parse().map_err(|_| SynthError::BadMix(format!("bad fraction {v:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::BadMix(format!("fraction {v} outside [0, 1]")));
            }
            let kind: Corruption = k.trim().parse().map_err(SynthError::BadMix)?;
            *mix.slot(kind) = v;
        }
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let total = self.clean + self.occluded + self.blurred + self.noisy;
        if (total - 1.0).abs() > 1e-6 {
            return Err(SynthError::BadMix(format!("fractions sum to {total}, expected 1")));
        }
        Ok(())
    }

    fn slot(&mut self, kind: Corruption) -> &mut f64 {
        match kind {
            Corruption::Clean => &mut self.clean,
            Corruption::Occluded => &mut self.occluded,
            Corruption::Blurred => &mut self.blurred,
            Corruption::Noisy => &mut self.noisy,
        }
    }

    fn pick(&self, u: f64) -> Corruption {
        let mut acc = 0.0;
        for (kind, f) in [
            (Corruption::Clean, self.clean),
            (Corruption::Occluded, self.occluded),
            (Corruption::Blurred, self.blurred),
            (Corruption::Noisy, self.noisy),
        ] {
            acc += f;
            if u < acc {
                return kind;
            }
        }
        Corruption::Clean
    }
}

/// Everything that determines a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n: usize,
    pub charset: Charset,
    pub min_len: usize,
    pub max_len: usize,
    pub mix: CorruptionMix,
    pub shape: ImageShape,
    /// Corruption severity is drawn uniformly from this range.
    pub severity: (f64, f64),
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(n: usize, charset: Charset, seed: u64) -> Self {
        let max_len = charset.max_label_len().min(8);
        Self {
            n,
            charset,
            min_len: 1,
            max_len,
            mix: CorruptionMix::default(),
            shape: ImageShape::DEFAULT,
            severity: (0.5, 1.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n == 0 {
            return Err(SynthError::EmptyDataset);
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > self.charset.max_label_len() {
            return Err(SynthError::BadLengthRange { min: self.min_len, max: self.max_len });
        }
        self.mix.validate()
    }
}

const MAX_LABEL_ATTEMPTS: usize = 100;

/// Generates sample `index`. The sample's generator is seeded with
/// `seed ^ index`, so any subset can be produced independently. Labels in
/// `exclude` are redrawn a bounded number of times.
pub fn generate_sample(spec: &DatasetSpec, index: usize, exclude: &HashSet<String>) -> Result<TextImage, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let chars = spec.charset.chars();
    let mut label = String::new();
    for _ in 0..MAX_LABEL_ATTEMPTS {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        label = (0..len).map(|_| chars[rng.gen_range(0..chars.len())]).collect();
        if !exclude.contains(&label) {
            break;
        }
    }
    let img = render(&label, spec.shape, &mut rng)?;
    let kind = spec.mix.pick(rng.gen::<f64>());
    let (lo, hi) = spec.severity;
    let severity = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    Ok(corrupt(&img, kind, severity, &mut rng))
}

/// Generates the whole dataset in memory.
pub fn generate(spec: &DatasetSpec, exclude: &HashSet<String>) -> Result<Vec<TextImage>, SynthError> {
    spec.validate()?;
    (0..spec.n).map(|i| generate_sample(spec, i, exclude)).collect()
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub filename: String,
    pub label: String,
    pub tags: BTreeSet<Corruption>,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        let tags: Vec<_> = self.tags.iter().map(|t| t.as_str()).collect();
        format!("{}\t{}\t{}", self.filename, self.label, tags.join(","))
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self, SynthError> {
        let corrupt = |why: &str| SynthError::ManifestCorrupt { line: line_no, reason: why.to_string() };
        let fields: Vec<&str> = line.split('\t').collect();
        let [filename, label, tags] = fields[..] else {
            return Err(corrupt("expected three tab-separated fields"));
        };
        if filename.is_empty() || filename.contains('/') {
            return Err(corrupt("bad filename"));
        }
        let tags = tags
            .split(',')
            .map(|t| t.parse::<Corruption>())
            .collect::<Result<BTreeSet<_>, _>>()
            .map_err(|e| corrupt(&e))?;
        Ok(Self { filename: filename.to_string(), label: label.to_string(), tags })
    }
}

fn image_extension(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

/// Renders `spec` to `dir`, returning the manifest entries in order.
pub fn build_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    build_dataset_excluding(spec, dir, &HashSet::new())
}

pub fn build_dataset_excluding(
    spec: &DatasetSpec,
    dir: &Path,
    exclude: &HashSet<String>,
) -> Result<Vec<ManifestEntry>, SynthError> {
    spec.validate()?;
    if spec.shape.channels != 1 && spec.shape.channels != 3 {
        return Err(SynthError::UnsupportedChannels(spec.shape.channels));
    }
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let width = spec.n.to_string().len().max(6);
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
    let mut entries = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let img = generate_sample(spec, i, exclude)?;
        let filename = format!("{i:0width$}.{}", image_extension(spec.shape.channels));
        write_pnm(&dir.join(IMAGE_DIR).join(&filename), &img)?;
        let entry = ManifestEntry { filename, label: img.label.clone(), tags: img.tags.clone() };
        writeln!(manifest, "{}", entry.to_line())?;
        entries.push(entry);
    }
    manifest.flush()?;
    Ok(entries)
}

/// Named splits with labels kept disjoint across splits where the label
/// space allows.
pub fn build_splits(spec: &DatasetSpec, dir: &Path, splits: &[(&str, usize)]) -> Result<Vec<PathBuf>, SynthError> {
    let mut used = HashSet::new();
    let mut out = Vec::new();
    for (k, &(name, n)) in splits.iter().enumerate() {
        let split = DatasetSpec { n, seed: split_seed(spec.seed, k), ..spec.clone() };
        let path = dir.join(name);
        let entries = build_dataset_excluding(&split, &path, &used)?;
        used.extend(entries.into_iter().map(|e| e.label));
        out.push(path);
    }
    Ok(out)
}

/// Seed for the `k`-th split derived from a base seed.
pub fn split_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    let reader = BufReader::new(File::open(dir.join(MANIFEST))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(ManifestEntry::parse(&line, i + 1)?);
    }
    Ok(out)
}

/// Streams samples in manifest order.
pub struct DatasetReader {
    dir: PathBuf,
    entries: std::vec::IntoIter<ManifestEntry>,
}

impl DatasetReader {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() == 0
    }
}

impl Iterator for DatasetReader {
    type Item = Result<TextImage, SynthError>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.entries.next()?;
        Some(read_pnm(&self.dir.join(IMAGE_DIR).join(&entry.filename)).map(|(shape, pixels)| TextImage {
            shape,
            pixels,
            label: entry.label,
            tags: entry.tags,
            layout: Vec::new(),
        }))
    }
}

pub fn load_dataset(dir: &Path) -> Result<DatasetReader, SynthError> {
    let entries = read_manifest(dir)?;
    Ok(DatasetReader { dir: dir.to_path_buf(), entries: entries.into_iter() })
}

/// `[-1, 1]` to a byte; the round trip error is at most `1/255`.
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn write_pnm(path: &Path, img: &TextImage) -> Result<(), SynthError> {
    write_pnm_bytes(path, img.shape, &img.pixels.iter().map(|&v| quantize(v)).collect::<Vec<_>>())
}

pub fn write_pnm_bytes(path: &Path, shape: ImageShape, bytes: &[u8]) -> Result<(), SynthError> {
    let magic = match shape.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(SynthError::UnsupportedChannels(c)),
    };
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "{magic}\n{} {}\n255\n", shape.width, shape.height)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<(ImageShape, Vec<f32>), SynthError> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let bad = |why: &str| SynthError::BadImage { path: path.to_path_buf(), reason: why.to_string() };
    // Header: magic, width, height, maxval separated by single whitespace runs.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("unsupported magic")),
    };
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("only 8-bit images are supported"));
    }
    let shape = ImageShape { height, width, channels };
    let body = raw.get(pos..pos + shape.num_values()).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((shape, body.iter().map(|&b| dequantize(b)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, seed: u64) -> DatasetSpec {
        DatasetSpec::new(n, Charset::prefix(16, 25).unwrap(), seed)
    }

    #[test]
    fn build_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let entries = build_dataset(&spec(10, 3), dir.path()).unwrap();
        let loaded: Vec<_> = load_dataset(dir.path()).unwrap().collect::<Result<_, _>>().unwrap();
        assert_eq!(loaded.len(), 10);
        let generated = generate(&spec(10, 3), &HashSet::new()).unwrap();
        for ((img, e), g) in loaded.iter().zip(&entries).zip(&generated) {
            assert_eq!(img.label, e.label);
            assert_eq!(img.tags, g.tags);
            let err = img.pixels.iter().zip(&g.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(err <= 1.0 / 127.0, "quantization error {err}");
        }
    }

    #[test]
    fn manifests_are_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        build_dataset(&spec(10, 1), a.path()).unwrap();
        build_dataset(&spec(10, 1), b.path()).unwrap();
        let ma = fs::read(a.path().join(MANIFEST)).unwrap();
        assert_eq!(ma, fs::read(b.path().join(MANIFEST)).unwrap());
        assert!(!ma.contains(&b'\r'));
    }

    #[test]
    fn mix_fraction_concentrates() {
        let mut s = spec(1000, 11);
        s.mix = CorruptionMix::parse("clean=0.5,occluded=0.5").unwrap();
        let data = generate(&s, &HashSet::new()).unwrap();
        let occluded = data.iter().filter(|d| d.has_tag(Corruption::Occluded)).count() as f64 / 1000.0;
        assert!((occluded - 0.5).abs() <= 0.05, "{occluded}");
    }

    #[test]
    fn mix_parsing() {
        assert_eq!(CorruptionMix::parse("clean=0.7,occluded=0.1,blurred=0.1,noisy=0.1").unwrap(), CorruptionMix::default());
        assert!(CorruptionMix::parse("clean=0.7").is_err());
        assert!(CorruptionMix::parse("dirty=1").is_err());
        assert!(CorruptionMix::parse("clean").is_err());
    }

    #[test]
    fn splits_have_disjoint_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(1, 5);
        s.min_len = 1;
        s.max_len = 2;
        let paths = build_splits(&s, dir.path(), &[("train", 100), ("test", 50)]).unwrap();
        let train: HashSet<_> = read_manifest(&paths[0]).unwrap().into_iter().map(|e| e.label).collect();
        let test = read_manifest(&paths[1]).unwrap();
        assert!(test.iter().all(|e| !train.contains(&e.label)));
    }

    #[test]
    fn corrupt_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "a.pgm\tab\tclean\nb.pgm\tcd\n").unwrap();
        match load_dataset(dir.path()) {
            Err(SynthError::ManifestCorrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}", other = other.map(|r| r.len())),
        }
        assert!(matches!(load_dataset(&dir.path().join("missing")), Err(SynthError::Io(_))));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(generate(&spec(0, 0), &HashSet::new()), Err(SynthError::EmptyDataset)));
    }
}
