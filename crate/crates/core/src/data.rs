//! Synthetic paired-view datasets and the `MMDS1` text format.
//!
//! Values are rounded to nine significant digits when generated, which is
//! exactly what the file format stores, so generated datasets round-trip
//! through disk bit for bit.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, substream, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFamily {
    GmmPair,
    BitmapDigits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub family: DatasetFamily,
    pub classes: usize,
    pub modalities: usize,
    /// Isotropic per-coordinate noise scale.
    pub noise: f64,
    /// Circle radius for `gmm_pair`.
    pub radius: f64,
    /// Per-modality background level for `bitmap_digits`; cycled when there
    /// are more modalities than entries.
    pub background_levels: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            family: DatasetFamily::GmmPair,
            classes: 3,
            modalities: 2,
            noise: 0.3,
            radius: 4.0,
            background_levels: vec![0.1, 0.2],
            n_train: 3000,
            n_test: 600,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("data.classes must be >= 2".into()));
        }
        if self.modalities < 2 {
            return Err(Error::Config("data.modalities must be >= 2".into()));
        }
        if self.n_train < self.classes * 10 || self.n_test < self.classes * 10 {
            return Err(Error::Config("data.n_train and data.n_test must be >= 10 * classes".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("data.noise must be non-negative".into()));
        }
        if self.family == DatasetFamily::BitmapDigits {
            if self.classes > GLYPHS.len() {
                return Err(Error::Config(format!(
                    "bitmap_digits supports at most {} classes",
                    GLYPHS.len()
                )));
            }
            if self.background_levels.is_empty() {
                return Err(Error::Config("data.background_levels must not be empty".into()));
            }
        }
        Ok(())
    }

    pub fn view_dims(&self) -> Vec<usize> {
        let d = match self.family {
            DatasetFamily::GmmPair => 2,
            DatasetFamily::BitmapDigits => 64,
        };
        vec![d; self.modalities]
    }
}

/// One labeled example with its aligned views.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalExample {
    pub label: usize,
    pub views: Vec<Vec<f64>>,
}

/// Column-oriented storage: one row-major `[n × D_i]` block per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub classes: usize,
    pub dims: Vec<usize>,
    pub labels: Vec<usize>,
    pub views: Vec<Vec<f64>>,
}

/// Aligned per-modality observations for a subset of examples. Labels are
/// carried for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub views: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl MultimodalBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modalities(&self) -> usize {
        self.views.len()
    }

    /// The batch stacked on top of itself.
    pub fn duplicated(&self) -> MultimodalBatch {
        MultimodalBatch {
            views: self
                .views
                .iter()
                .map(|v| Tensor::vstack(&[v.clone(), v.clone()]).expect("same shape"))
                .collect(),
            labels: self.labels.iter().chain(&self.labels).copied().collect(),
        }
    }
}

impl MultimodalDataset {
    pub fn empty(classes: usize, dims: Vec<usize>) -> Self {
        let views = vec![Vec::new(); dims.len()];
        MultimodalDataset {
            classes,
            dims,
            labels: Vec::new(),
            views,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn view(&self, modality: usize, i: usize) -> &[f64] {
        let d = self.dims[modality];
        &self.views[modality][i * d..(i + 1) * d]
    }

    pub fn example(&self, i: usize) -> MultimodalExample {
        MultimodalExample {
            label: self.labels[i],
            views: (0..self.modalities()).map(|m| self.view(m, i).to_vec()).collect(),
        }
    }

    pub fn push(&mut self, ex: MultimodalExample) -> Result<()> {
        if ex.views.len() != self.modalities() {
            return Err(Error::dims("dataset push", &self.dims, &[ex.views.len()]));
        }
        for (m, v) in ex.views.iter().enumerate() {
            if v.len() != self.dims[m] {
                return Err(Error::dims("dataset push", &[self.dims[m]], &[v.len()]));
            }
        }
        self.labels.push(ex.label);
        for (m, v) in ex.views.into_iter().enumerate() {
            self.views[m].extend(v);
        }
        Ok(())
    }

    pub fn batch(&self, idx: &[usize]) -> MultimodalBatch {
        let views = (0..self.modalities())
            .map(|m| {
                let d = self.dims[m];
                let mut v = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    v.extend_from_slice(self.view(m, i));
                }
                Tensor::matrix(idx.len(), d, v).expect("shape")
            })
            .collect();
        MultimodalBatch {
            views,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> MultimodalBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Modality `m` as an `[n × D_m]` tensor.
    pub fn view_tensor(&self, m: usize) -> Tensor {
        Tensor::matrix(self.len(), self.dims[m], self.views[m].clone()).expect("shape")
    }
}

/// Rounds to nine significant digits, the precision of the file format.
pub fn quantize(x: f64) -> f64 {
    format_value(x).parse().expect("formatted float parses")
}

fn format_value(x: f64) -> String {
    format!("{x:.8e}")
}

/// Balanced labels in random order.
fn balanced_labels(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    labels
}

/// Class centers for `gmm_pair`: modality `i` places class `k` at angle
/// `2π·((k + i) mod K)/K + i·π/K` on a circle, so every modality after the
/// first is rotated and its class-to-position assignment is a shift.
pub fn gmm_centers(spec: &DatasetSpec) -> Vec<Vec<[f64; 2]>> {
    let k = spec.classes;
    (0..spec.modalities)
        .map(|i| {
            (0..k)
                .map(|c| {
                    let slot = (c + i) % k;
                    let angle = 2.0 * PI * slot as f64 / k as f64 + i as f64 * PI / k as f64;
                    [spec.radius * angle.cos(), spec.radius * angle.sin()]
                })
                .collect()
        })
        .collect()
}

fn gmm_split(spec: &DatasetSpec, n: usize, rng: &mut Rng) -> MultimodalDataset {
    let centers = gmm_centers(spec);
    let mut ds = MultimodalDataset::empty(spec.classes, spec.view_dims());
    for label in balanced_labels(n, spec.classes, rng) {
        let views = centers
            .iter()
            .map(|c| {
                let eps = normal_vec(rng, 2);
                (0..2).map(|j| quantize(c[label][j] + spec.noise * eps[j])).collect()
            })
            .collect();
        ds.push(MultimodalExample { label, views }).expect("consistent dims");
    }
    ds
}

pub fn generate_gmm_pair(spec: &DatasetSpec) -> Result<(MultimodalDataset, MultimodalDataset)> {
    spec.validate()?;
    if spec.family != DatasetFamily::GmmPair {
        return Err(Error::Config("generate_gmm_pair requires family = gmm_pair".into()));
    }
    let train = gmm_split(spec, spec.n_train, &mut substream(spec.seed, 0));
    let test = gmm_split(spec, spec.n_test, &mut substream(spec.seed, 1));
    Ok((train, test))
}

const GLYPHS: [[&str; 8]; 10] = [
    ["..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", ".#....#.", "..####.."],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "...##...", "..####.."],
    ["..####..", ".#....#.", "......#.", ".....#..", "...##...", "..#.....", ".#......", ".######."],
    ["..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."],
    ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", ".....#.."],
    [".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."],
    ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", ".....#..", "..###..."],
];

/// The 64-pixel glyph for `class` as 0/1 values.
pub fn glyph(class: usize) -> Vec<f64> {
    GLYPHS[class]
        .iter()
        .flat_map(|row| row.chars().map(|c| if c == '#' { 1.0 } else { 0.0 }))
        .collect()
}

/// Noise-free view of `class` in modality `m`: even modalities draw the
/// glyph at 1 on the background level; odd modalities are inverted, with
/// the glyph at the background level on 1.
pub fn bitmap_template(spec: &DatasetSpec, class: usize, m: usize) -> Vec<f64> {
    let level = spec.background_levels[m % spec.background_levels.len()];
    let inverted = m % 2 == 1;
    glyph(class)
        .into_iter()
        .map(|g| match (inverted, g > 0.5) {
            (false, true) | (true, false) => 1.0,
            _ => level,
        })
        .collect()
}

fn bitmap_split(spec: &DatasetSpec, n: usize, rng: &mut Rng) -> MultimodalDataset {
    let templates: Vec<Vec<Vec<f64>>> = (0..spec.modalities)
        .map(|m| (0..spec.classes).map(|c| bitmap_template(spec, c, m)).collect())
        .collect();
    let mut ds = MultimodalDataset::empty(spec.classes, spec.view_dims());
    for label in balanced_labels(n, spec.classes, rng) {
        let views = templates
            .iter()
            .map(|t| {
                let eps = normal_vec(rng, 64);
                t[label]
                    .iter()
                    .zip(eps)
                    .map(|(v, e)| quantize((v + spec.noise * e).clamp(0.0, 1.0)))
                    .collect()
            })
            .collect();
        ds.push(MultimodalExample { label, views }).expect("consistent dims");
    }
    ds
}

pub fn generate_bitmap_digits(spec: &DatasetSpec) -> Result<(MultimodalDataset, MultimodalDataset)> {
    spec.validate()?;
    if spec.family != DatasetFamily::BitmapDigits {
        return Err(Error::Config("generate_bitmap_digits requires family = bitmap_digits".into()));
    }
    let train = bitmap_split(spec, spec.n_train, &mut substream(spec.seed, 0));
    let test = bitmap_split(spec, spec.n_test, &mut substream(spec.seed, 1));
    Ok((train, test))
}

/// Dispatches on `spec.family`.
pub fn generate(spec: &DatasetSpec) -> Result<(MultimodalDataset, MultimodalDataset)> {
    match spec.family {
        DatasetFamily::GmmPair => generate_gmm_pair(spec),
        DatasetFamily::BitmapDigits => generate_bitmap_digits(spec),
    }
}

/// Serializes to the `MMDS1` text format.
pub fn encode_dataset(ds: &MultimodalDataset) -> String {
    let dims: Vec<String> = ds.dims.iter().map(|d| d.to_string()).collect();
    let mut out = format!(
        "MMDS1 m={} K={} n={} dims={}\n",
        ds.modalities(),
        ds.classes,
        ds.len(),
        dims.join(",")
    );
    for i in 0..ds.len() {
        write!(out, "{}", ds.labels[i]).expect("string write");
        for m in 0..ds.modalities() {
            out.push(',');
            let vals: Vec<String> = ds.view(m, i).iter().map(|&v| format_value(v)).collect();
            out.push_str(&vals.join(";"));
        }
        out.push('\n');
    }
    out
}

fn parse_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        detail: detail.into(),
    }
}

fn header_field<'a>(tok: Option<&'a str>, key: &str, offset: usize) -> Result<&'a str> {
    let tok = tok.ok_or_else(|| parse_err(offset, format!("missing header field {key}")))?;
    tok.strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| parse_err(offset, format!("expected {key}=..., found {tok:?}")))
}

fn parse_usize(s: &str, offset: usize, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| parse_err(offset, format!("invalid {what}: {s:?}")))
}

/// Parses the `MMDS1` text format. Any defect yields an error carrying the
/// byte offset of the offending line; no partial dataset is returned.
pub fn decode_dataset(text: &str) -> Result<MultimodalDataset> {
    let mut offset = 0;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| parse_err(0, "empty file"))?;
    if !header.ends_with('\n') {
        return Err(parse_err(0, "header is not newline terminated"));
    }
    let mut toks = header.trim_end().split(' ');
    if toks.next() != Some("MMDS1") {
        return Err(parse_err(0, "missing MMDS1 magic"));
    }
    let m = parse_usize(header_field(toks.next(), "m", 0)?, 0, "m")?;
    let k = parse_usize(header_field(toks.next(), "K", 0)?, 0, "K")?;
    let n = parse_usize(header_field(toks.next(), "n", 0)?, 0, "n")?;
    let dims_s = header_field(toks.next(), "dims", 0)?;
    let dims = dims_s
        .split(',')
        .map(|d| parse_usize(d, 0, "dims"))
        .collect::<Result<Vec<_>>>()?;
    if dims.len() != m {
        return Err(parse_err(0, format!("dims lists {} extents but m={m}", dims.len())));
    }
    if toks.next().is_some() {
        return Err(parse_err(0, "trailing header fields"));
    }
    offset += header.len();

    let mut ds = MultimodalDataset::empty(k, dims.clone());
    for row in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| parse_err(offset, format!("file ends after {row} of {n} rows")))?;
        if !line.ends_with('\n') {
            return Err(parse_err(offset, format!("row {row} is truncated")));
        }
        let mut fields = line.trim_end_matches('\n').split(',');
        let label_s = fields.next().unwrap_or("");
        let label = parse_usize(label_s, offset, "label")?;
        if label >= k {
            return Err(parse_err(offset, format!("label {label} outside [0, {k})")));
        }
        let mut views = Vec::with_capacity(m);
        for (mi, &d) in dims.iter().enumerate() {
            let field = fields
                .next()
                .ok_or_else(|| parse_err(offset, format!("row {row} is missing view {mi}")))?;
            let vals = if d == 0 && field.is_empty() {
                Vec::new()
            } else {
                field
                    .split(';')
                    .map(|v| {
                        v.parse::<f64>()
                            .map_err(|_| parse_err(offset, format!("invalid float {v:?} in row {row}")))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            if vals.len() != d {
                return Err(parse_err(
                    offset,
                    format!("row {row} view {mi} has {} values, expected {d}", vals.len()),
                ));
            }
            views.push(vals);
        }
        if fields.next().is_some() {
            return Err(parse_err(offset, format!("row {row} has extra fields")));
        }
        ds.push(MultimodalExample { label, views })?;
        offset += line.len();
    }
    if let Some(extra) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(parse_err(offset, "data after the declared rows"));
        }
    }
    Ok(ds)
}

pub fn save_dataset(ds: &MultimodalDataset, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, encode_dataset(ds).as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<MultimodalDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gmm(noise: f64, n: usize) -> DatasetSpec {
        DatasetSpec {
            noise,
            n_train: n,
            n_test: n,
            ..DatasetSpec::default()
        }
    }

    fn nearest(x: &[f64], templates: &[Vec<f64>]) -> usize {
        let dist = |t: &Vec<f64>| x.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..templates.len())
            .min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b])))
            .unwrap()
    }

    #[test]
    fn noiseless_examples_sit_on_centers() {
        let spec = gmm(0.0, 300);
        let (train, _) = generate_gmm_pair(&spec).unwrap();
        let centers = gmm_centers(&spec);
        for i in 0..train.len() {
            for m in 0..2 {
                let c = centers[m][train.labels[i]];
                assert_eq!(train.view(m, i), &[quantize(c[0]), quantize(c[1])]);
            }
        }
    }

    #[test]
    fn nearest_center_classifier_is_near_perfect() {
        let spec = gmm(0.3, 3000);
        let (train, _) = generate_gmm_pair(&spec).unwrap();
        let centers = gmm_centers(&spec);
        for m in 0..2 {
            let t: Vec<Vec<f64>> = centers[m].iter().map(|c| c.to_vec()).collect();
            let hits = (0..train.len())
                .filter(|&i| nearest(train.view(m, i), &t) == train.labels[i])
                .count();
            assert!(hits as f64 / train.len() as f64 >= 0.99);
        }
    }

    #[test]
    fn labels_are_balanced() {
        let (train, _) = generate_gmm_pair(&gmm(0.3, 3000)).unwrap();
        let mut counts = [0usize; 3];
        for &l in &train.labels {
            counts[l] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1000.0 - 1.0).abs() <= 0.05);
        }
    }

    #[test]
    fn seed_determinism_and_split_independence() {
        let spec = gmm(0.3, 300);
        let (a, at) = generate_gmm_pair(&spec).unwrap();
        let (b, _) = generate_gmm_pair(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.views[0][..10], at.views[0][..10]);
    }

    #[test]
    fn bitmap_views_are_fixed_without_noise() {
        let spec = DatasetSpec {
            family: DatasetFamily::BitmapDigits,
            classes: 5,
            noise: 0.0,
            n_train: 100,
            n_test: 50,
            ..DatasetSpec::default()
        };
        let (train, _) = generate_bitmap_digits(&spec).unwrap();
        for i in 0..train.len() {
            for m in 0..2 {
                let t: Vec<f64> = bitmap_template(&spec, train.labels[i], m).into_iter().map(quantize).collect();
                assert_eq!(train.view(m, i), t.as_slice());
            }
        }
    }

    #[test]
    fn bitmap_template_matching_accuracy() {
        let spec = DatasetSpec {
            family: DatasetFamily::BitmapDigits,
            classes: 5,
            noise: 0.1,
            n_train: 1000,
            n_test: 100,
            ..DatasetSpec::default()
        };
        let (train, _) = generate_bitmap_digits(&spec).unwrap();
        for m in 0..2 {
            let t: Vec<Vec<f64>> = (0..5).map(|c| bitmap_template(&spec, c, m)).collect();
            let hits = (0..train.len())
                .filter(|&i| nearest(train.view(m, i), &t) == train.labels[i])
                .count();
            assert!(hits as f64 / train.len() as f64 >= 0.95);
            assert!(train.views[m].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn too_many_bitmap_classes_rejected() {
        let spec = DatasetSpec {
            family: DatasetFamily::BitmapDigits,
            classes: 11,
            n_train: 200,
            n_test: 200,
            ..DatasetSpec::default()
        };
        assert!(generate_bitmap_digits(&spec).is_err());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (train, _) = generate_gmm_pair(&gmm(0.3, 60)).unwrap();
        let back = decode_dataset(&encode_dataset(&train)).unwrap();
        assert_eq!(back.labels, train.labels);
        for (a, b) in back.views.iter().zip(&train.views) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (train, _) = generate_gmm_pair(&gmm(0.3, 60)).unwrap();
        let text = encode_dataset(&train);
        let cut = &text[..text.len() - 7];
        match decode_dataset(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0 && offset < cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing_rows: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(matches!(decode_dataset(&missing_rows), Err(Error::Parse { .. })));
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let ds = decode_dataset("MMDS1 m=2 K=3 n=0 dims=2,2\n").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.dims, vec![2, 2]);
    }

    #[test]
    fn malformed_value_reports_line_offset() {
        let text = "MMDS1 m=2 K=3 n=2 dims=1,1\n0,1.0,2.0\n1,x,2.0\n";
        match decode_dataset(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 37),
            other => panic!("{other:?}"),
        }
    }
}
