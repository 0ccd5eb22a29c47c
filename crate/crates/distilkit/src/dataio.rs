//! MNIST IDX ingestion, binarisation and minibatch generators.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::binio::{self, Reader, Writer};
use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::nade::NadeModel;
use crate::rng::{below, bernoulli, normal, seeded, shuffle, Rng};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const CACHE_MAGIC: &[u8; 8] = b"DKDATA\0\0";

pub const DATA_DIR_ENV: &str = "DISTILKIT_DATA_DIR";

/// Row-major `n × d` images with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(d: usize, images: Vec<f64>, labels: Option<Vec<u8>>) -> Result<Self> {
        if d == 0 || !images.len().is_multiple_of(d) {
            return Err(Error::Config("image buffer is not a multiple of d".into()));
        }
        let n = images.len() / d;
        if let Some(l) = &labels {
            crate::error::check_dim("labels", n, l.len())?;
        }
        Ok(Dataset {
            n,
            d,
            rows: 1,
            cols: d,
            images,
            labels,
        })
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            n: idx.len(),
            d: self.d,
            rows: self.rows,
            cols: self.cols,
            images,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn head(&self, k: usize) -> Dataset {
        let idx: Vec<usize> = (0..k.min(self.n)).collect();
        self.subset(&idx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CACHE_MAGIC);
        w.u64(self.rows as u64);
        w.u64(self.cols as u64);
        w.f64s(&self.images);
        match &self.labels {
            Some(l) => {
                w.u8(1);
                w.u64(l.len() as u64);
                for &v in l {
                    w.u8(v);
                }
            }
            None => w.u8(0),
        }
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, CACHE_MAGIC)?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let images = r.f64s()?;
        let labels = if r.u8()? == 1 {
            let n = r.u64()? as usize;
            Some((0..n).map(|_| r.u8()).collect::<Result<Vec<u8>>>()?)
        } else {
            None
        };
        r.finish()?;
        let mut ds = Dataset::new(rows * cols, images, labels)?;
        ds.rows = rows;
        ds.cols = cols;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_bytes(&binio::read_file(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn be_u32(&mut self) -> Result<u32> {
        if self.buf.len() < self.pos + 4 {
            return Err(Error::Parse {
                offset: self.pos,
                msg: "truncated IDX header".into(),
            });
        }
        let v = u32::from_be_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let have = self.buf.len() - self.pos;
        if have < len {
            return Err(Error::Parse {
                offset: self.pos + have,
                msg: format!("truncated IDX payload: expected {len} bytes, found {have}"),
            });
        }
        Ok(&self.buf[self.pos..self.pos + len])
    }
}

/// Parses an IDX image file (magic 0x803); pixels are scaled to [0, 1].
pub fn parse_idx_images(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.be_u32()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad IDX image magic {magic:#010x}"),
        });
    }
    let n = c.be_u32()? as usize;
    let rows = c.be_u32()? as usize;
    let cols = c.be_u32()? as usize;
    let raw = c.payload(n * rows * cols)?;
    let images = raw.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Dataset {
        n,
        d: rows * cols,
        rows,
        cols,
        images,
        labels: None,
    })
}

/// Parses an IDX label file (magic 0x801).
pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.be_u32()?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad IDX label magic {magic:#010x}"),
        });
    }
    let n = c.be_u32()? as usize;
    let raw = c.payload(n)?;
    if let Some(p) = raw.iter().position(|&l| l > 9) {
        return Err(Error::Parse {
            offset: c.pos + p,
            msg: format!("label {} out of range 0..9", raw[p]),
        });
    }
    Ok(raw.to_vec())
}

/// Loads an IDX image file.
pub fn load_idx(path: &Path) -> Result<Dataset> {
    parse_idx_images(&binio::read_file(path)?)
}

/// Loads an image file together with its label file.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut ds = load_idx(images)?;
    let l = parse_idx_labels(&binio::read_file(labels)?)?;
    if l.len() != ds.n {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("count mismatch: {} images but {} labels", ds.n, l.len()),
        });
    }
    ds.labels = Some(l);
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Directory holding the raw MNIST IDX files: `$DISTILKIT_DATA_DIR`, else
/// `./data/mnist`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lab) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    load_idx_pair(&dir.join(img), &dir.join(lab))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinarizeMode {
    Round,
    Stochastic(u64),
}

pub fn binarize(ds: &Dataset, mode: BinarizeMode) -> Dataset {
    let images = match mode {
        BinarizeMode::Round => ds.images.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect(),
        BinarizeMode::Stochastic(seed) => {
            let mut rng = seeded(seed);
            ds.images.iter().map(|&p| bernoulli(&mut rng, p)).collect()
        }
    };
    Dataset { images, ..ds.clone() }
}

/// Indices of a label-stratified subset of size `k`, chosen by a seeded
/// shuffle within each class. Class quotas follow the class proportions, with
/// leftover slots going to the largest fractional parts.
pub fn stratified_subset(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("stratified subset needs labels".into()))?;
    if k > ds.n {
        return Err(Error::Config("subset larger than dataset".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let exact: Vec<f64> = by_class
        .iter()
        .map(|c| c.len() as f64 * k as f64 / ds.n as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..10).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = k - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(k);
    for (c, idx) in by_class.iter_mut().enumerate() {
        shuffle(&mut rng, idx);
        out.extend_from_slice(&idx[..quota[c]]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Raster column-wise pixel ordering: entry `k` is the pixel visited `k`-th.
pub fn raster_columnwise(rows: usize, cols: usize) -> Vec<usize> {
    let mut p = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            p.push(r * cols + c);
        }
    }
    p
}

#[derive(Clone, Debug)]
pub enum GeneratorKind {
    /// Uniform draws with replacement.
    ResampleWith(Arc<Dataset>),
    /// Epoch-wise random permutations.
    ResampleWithout {
        data: Arc<Dataset>,
        perm: Vec<usize>,
        pos: usize,
    },
    /// I.i.d. N(0, 1) pixels.
    GaussianNoise { d: usize },
    /// NADE samples, reported as their per-pixel conditional probabilities.
    NadeGen(Arc<NadeModel>),
}

/// Inputs plus their dataset indices, when the generator has any.
pub type IndexedBatch = (Vec<Vec<f64>>, Option<Vec<usize>>);

/// Stateful source of training inputs.
#[derive(Clone, Debug)]
pub struct DataGenerator {
    pub kind: GeneratorKind,
    rng: Rng,
}

impl DataGenerator {
    pub fn resample_with(data: Arc<Dataset>, seed: u64) -> Self {
        DataGenerator {
            kind: GeneratorKind::ResampleWith(data),
            rng: seeded(seed),
        }
    }

    pub fn resample_without(data: Arc<Dataset>, seed: u64) -> Self {
        DataGenerator {
            kind: GeneratorKind::ResampleWithout {
                data,
                perm: Vec::new(),
                pos: 0,
            },
            rng: seeded(seed),
        }
    }

    pub fn gaussian_noise(d: usize, seed: u64) -> Self {
        DataGenerator {
            kind: GeneratorKind::GaussianNoise { d },
            rng: seeded(seed),
        }
    }

    pub fn nade(model: Arc<NadeModel>, seed: u64) -> Self {
        DataGenerator {
            kind: GeneratorKind::NadeGen(model),
            rng: seeded(seed),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            GeneratorKind::ResampleWith(d) => d.d,
            GeneratorKind::ResampleWithout { data, .. } => data.d,
            GeneratorKind::GaussianNoise { d } => *d,
            GeneratorKind::NadeGen(m) => m.dim(),
        }
    }

    /// Draws `s` inputs; dataset-backed variants also return dataset indices.
    pub fn next_indexed(&mut self, s: usize) -> Result<IndexedBatch> {
        if s == 0 {
            return Err(Error::Config("minibatch size must be >= 1".into()));
        }
        let rng = &mut self.rng;
        match &mut self.kind {
            GeneratorKind::ResampleWith(data) => {
                if data.n == 0 {
                    return Err(Error::Config("empty dataset".into()));
                }
                let idx: Vec<usize> = (0..s).map(|_| below(rng, data.n)).collect();
                Ok((idx.iter().map(|&i| data.image(i).to_vec()).collect(), Some(idx)))
            }
            GeneratorKind::ResampleWithout { data, perm, pos } => {
                if data.n == 0 {
                    return Err(Error::Config("empty dataset".into()));
                }
                let mut idx = Vec::with_capacity(s);
                while idx.len() < s {
                    if *pos >= perm.len() {
                        *perm = (0..data.n).collect();
                        shuffle(rng, perm);
                        *pos = 0;
                    }
                    let take = (s - idx.len()).min(perm.len() - *pos);
                    idx.extend_from_slice(&perm[*pos..*pos + take]);
                    *pos += take;
                }
                Ok((idx.iter().map(|&i| data.image(i).to_vec()).collect(), Some(idx)))
            }
            GeneratorKind::GaussianNoise { d } => {
                Ok(((0..s).map(|_| (0..*d).map(|_| normal(rng)).collect()).collect(), None))
            }
            GeneratorKind::NadeGen(m) => Ok(((0..s).map(|_| m.sample(rng).1).collect(), None)),
        }
    }

    pub fn next_minibatch(&mut self, s: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self.next_indexed(s)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, px: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, r, c] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn parses_and_scales() {
        let ds = parse_idx_images(&idx_images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!((ds.n, ds.rows, ds.cols), (2, 1, 2));
        assert_eq!(ds.images, vec![0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn truncated_file_names_offset() {
        let err = parse_idx_images(&idx_images(2, 1, 2, &[0, 255, 51])).unwrap_err();
        match err {
            Error::Parse { offset, msg } => {
                assert_eq!(offset, 19);
                assert!(msg.contains("truncated"));
            }
            e => panic!("{e}"),
        }
        assert!(matches!(
            parse_idx_images(&[0, 0, 8]),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut b = idx_images(1, 1, 1, &[0]);
        b[3] = 0x01;
        assert!(parse_idx_images(&b).is_err());
    }

    #[test]
    fn binarize_modes() {
        let ds = Dataset::new(3, vec![0.7, 0.2, 0.0], None).unwrap();
        let r = binarize(&ds, BinarizeMode::Round);
        assert_eq!(r.images, vec![1.0, 0.0, 0.0]);
        assert_eq!(binarize(&r, BinarizeMode::Round), r);
        let z = Dataset::new(4, vec![0.0; 4], None).unwrap();
        assert_eq!(binarize(&z, BinarizeMode::Stochastic(3)).images, z.images);
        let many = Dataset::new(1, vec![0.7; 100_000], None).unwrap();
        let b = binarize(&many, BinarizeMode::Stochastic(1));
        let m = crate::mathx::mean(&b.images);
        assert!((m - 0.7).abs() < 0.005, "{m}");
    }

    #[test]
    fn resample_without_covers_epoch() {
        let ds = Arc::new(Dataset::new(1, (0..10).map(|i| i as f64).collect(), None).unwrap());
        let mut g = DataGenerator::resample_without(ds, 4);
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.extend(g.next_indexed(3).unwrap().1.unwrap());
        }
        seen.push(g.next_indexed(1).unwrap().1.unwrap()[0]);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn resample_with_single_point() {
        let ds = Arc::new(Dataset::new(2, vec![0.25, 0.5], None).unwrap());
        let mut g = DataGenerator::resample_with(ds, 1);
        for x in g.next_minibatch(5).unwrap() {
            assert_eq!(x, vec![0.25, 0.5]);
        }
    }

    #[test]
    fn empty_dataset_errors() {
        let ds = Arc::new(Dataset::new(2, vec![], None).unwrap());
        assert!(DataGenerator::resample_with(ds, 1).next_minibatch(1).is_err());
    }

    #[test]
    fn columnwise_order() {
        assert_eq!(raster_columnwise(2, 3), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn stratified_subset_keeps_proportions() {
        let labels: Vec<u8> = (0..1000).map(|i| if i < 700 { 0 } else { 1 }).collect();
        let ds = Dataset::new(1, vec![0.0; 1000], Some(labels)).unwrap();
        let idx = stratified_subset(&ds, 100, 7).unwrap();
        let ones = idx.iter().filter(|&&i| i >= 700).count();
        assert_eq!(idx.len(), 100);
        assert_eq!(ones, 30);
        assert_eq!(idx, stratified_subset(&ds, 100, 7).unwrap());
    }

    #[test]
    fn cache_round_trip() {
        let ds = Dataset::new(2, vec![0.1, 0.2, 0.3, 0.4], Some(vec![3, 9])).unwrap();
        assert_eq!(Dataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
    }
}
