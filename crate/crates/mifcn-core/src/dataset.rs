//! Training and test data plumbing: cropped image pairs, anchor-patch
//! extraction, nonlocal similar-patch search, tuple archives, and test-case
//! directories.
//!
//! A training sample is a tuple of T patch pairs. The anchor pair comes from
//! a grid position inside the manually cropped retina region; the remaining
//! T-1 pairs are the most similar windows found anywhere in the crop,
//! ranked by sum of squared differences between high-SNR windows. During
//! training the noisy windows feed the branches and the high-SNR windows are
//! the targets.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image_io::load_image;
use crate::roi::Rect;
use crate::tensor::Tensor;

/// One registered noisy / high-SNR training image pair with its retina crop.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub noisy: Tensor,
    pub high_snr: Tensor,
    pub crop: Rect,
}

impl ImagePair {
    pub fn new(noisy: Tensor, high_snr: Tensor, crop: Rect) -> Result<ImagePair> {
        if noisy.shape().len() != 2 || noisy.shape() != high_snr.shape() {
            return Err(Error::Shape(format!(
                "image pair shapes differ: {:?} vs {:?}",
                noisy.shape(),
                high_snr.shape()
            )));
        }
        if !crop.fits_within(noisy.shape()[0], noisy.shape()[1]) {
            return Err(Error::Data(format!(
                "crop ({},{}) {}x{} exceeds the {}x{} image",
                crop.top,
                crop.left,
                crop.height,
                crop.width,
                noisy.shape()[0],
                noisy.shape()[1]
            )));
        }
        Ok(ImagePair { noisy, high_snr, crop })
    }
}

/// A noisy window and the high-SNR window at the same location.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub noisy: Tensor,
    pub high_snr: Tensor,
    /// Absolute (row, col) of the window's top-left corner in the source image.
    pub location: (usize, usize),
}

/// T patch pairs; index 0 is the anchor the others were matched against.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTuple {
    pub pairs: Vec<PatchPair>,
}

impl PatchTuple {
    pub fn branch_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn patch_size(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.noisy.shape()[0])
    }

    /// All patches square and of one common size.
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Data("empty patch tuple".into()));
        }
        let size = self.patch_size();
        for pair in &self.pairs {
            for t in [&pair.noisy, &pair.high_snr] {
                if t.shape() != [size, size] {
                    return Err(Error::Shape(format!(
                        "patch tuple mixes shapes: expected [{size}, {size}], got {:?}",
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Knobs for training-set construction.
#[derive(Clone, Copy, Debug)]
pub struct DatasetConfig {
    pub patch_size: usize,
    pub patches_per_pair: usize,
    /// Patches per tuple, = number of model branches (T).
    pub branches: usize,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig { patch_size: 15, patches_per_pair: 400, branches: 5 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patches_per_pair == 0 || self.branches == 0 {
            return Err(Error::Domain(
                "patch size, patch budget, and branch count must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Copy a square window out of a 2-D image.
pub fn extract_window(image: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if top + size > h || left + size > w {
        return Err(Error::Shape(format!(
            "window ({top},{left}) size {size} exceeds {h}x{w} image"
        )));
    }
    let mut out = Tensor::zeros(&[size, size]);
    for r in 0..size {
        let src = &image.data()[(top + r) * w + left..(top + r) * w + left + size];
        out.data_mut()[r * size..(r + 1) * size].copy_from_slice(src);
    }
    Ok(out)
}

/// Anchor grid for one crop: the chosen stride and the window positions,
/// exactly `budget` of them in row-major scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub stride: usize,
    pub locations: Vec<(usize, usize)>,
}

fn grid_count(span: usize, stride: usize) -> usize {
    span / stride + 1
}

/// Place a regular grid of `size`-sized windows over `crop` using the
/// largest stride that still yields at least `budget` positions (least
/// overlap first), then truncate to exactly `budget` in scan order.
pub fn extract_patches(crop: &Rect, size: usize, budget: usize) -> Result<AnchorGrid> {
    if budget == 0 {
        return Err(Error::Domain("patch budget must be positive".into()));
    }
    if crop.height < size || crop.width < size {
        return Err(Error::Data(format!(
            "crop {}x{} is smaller than the {size}x{size} patch",
            crop.height, crop.width
        )));
    }
    let row_span = crop.height - size;
    let col_span = crop.width - size;
    let available = grid_count(row_span, 1) * grid_count(col_span, 1);
    if available < budget {
        return Err(Error::Data(format!(
            "crop supports at most {available} patches, budget asks for {budget}"
        )));
    }
    let mut stride = row_span.max(col_span).max(1) + 1;
    loop {
        stride -= 1;
        if stride == 0 || grid_count(row_span, stride) * grid_count(col_span, stride) >= budget {
            break;
        }
    }
    let stride = stride.max(1);
    let mut locations = Vec::with_capacity(budget);
    'rows: for r in (0..=row_span).step_by(stride) {
        for c in (0..=col_span).step_by(stride) {
            locations.push((crop.top + r, crop.left + c));
            if locations.len() == budget {
                break 'rows;
            }
        }
    }
    Ok(AnchorGrid { stride, locations })
}

fn window_ssd(image: &Tensor, a: (usize, usize), b: (usize, usize), size: usize) -> f64 {
    let w = image.shape()[1];
    let data = image.data();
    let mut acc = 0.0;
    for r in 0..size {
        let ra = &data[(a.0 + r) * w + a.1..(a.0 + r) * w + a.1 + size];
        let rb = &data[(b.0 + r) * w + b.1..(b.0 + r) * w + b.1 + size];
        acc += ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    acc
}

/// Find the `count` most similar windows to the anchor inside the crop.
///
/// Similarity is the sum of squared differences between windows of
/// `reference` (the high-SNR image). Every in-bounds window at stride 1 is a
/// candidate. The anchor itself comes first, then ascending SSD with
/// row-major order breaking ties.
pub fn nonlocal_search(
    reference: &Tensor,
    crop: &Rect,
    anchor: (usize, usize),
    size: usize,
    count: usize,
) -> Result<Vec<(usize, usize)>> {
    if count == 0 {
        return Err(Error::Domain("nonlocal search needs count >= 1".into()));
    }
    if crop.height < size || crop.width < size {
        return Err(Error::Data(format!(
            "crop {}x{} is smaller than the {size}x{size} window",
            crop.height, crop.width
        )));
    }
    let row_hi = crop.bottom() - size;
    let col_hi = crop.right() - size;
    if anchor.0 < crop.top || anchor.0 > row_hi || anchor.1 < crop.left || anchor.1 > col_hi {
        return Err(Error::Data(format!(
            "anchor ({}, {}) does not lie fully inside the crop",
            anchor.0, anchor.1
        )));
    }
    let candidates = (row_hi - crop.top + 1) * (col_hi - crop.left + 1);
    if candidates < count {
        return Err(Error::Data(format!(
            "crop has {candidates} candidate windows, {count} requested"
        )));
    }
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(candidates - 1);
    for r in crop.top..=row_hi {
        for c in crop.left..=col_hi {
            if (r, c) == anchor {
                continue;
            }
            scored.push((window_ssd(reference, anchor, (r, c), size), r, c));
        }
    }
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("SSD of finite images is finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut out = Vec::with_capacity(count);
    out.push(anchor);
    out.extend(scored.iter().take(count - 1).map(|&(_, r, c)| (r, c)));
    Ok(out)
}

/// Result of building one training set: the tuples and the grid stride used
/// for each image pair, in input order.
#[derive(Clone, Debug)]
pub struct TrainingSetBuild {
    pub tuples: Vec<PatchTuple>,
    pub strides: Vec<usize>,
}

/// Assemble patch tuples from every image pair. Deterministic: same inputs,
/// same tuples.
pub fn build_training_set(pairs: &[ImagePair], config: &DatasetConfig) -> Result<TrainingSetBuild> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no training image pairs given".into()));
    }
    let mut tuples = Vec::with_capacity(pairs.len() * config.patches_per_pair);
    let mut strides = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let grid = extract_patches(&pair.crop, config.patch_size, config.patches_per_pair)?;
        strides.push(grid.stride);
        for &anchor in &grid.locations {
            let locations =
                nonlocal_search(&pair.high_snr, &pair.crop, anchor, config.patch_size, config.branches)?;
            let pairs_for_tuple = locations
                .iter()
                .map(|&(r, c)| {
                    Ok(PatchPair {
                        noisy: extract_window(&pair.noisy, r, c, config.patch_size)?,
                        high_snr: extract_window(&pair.high_snr, r, c, config.patch_size)?,
                        location: (r, c),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            tuples.push(PatchTuple { pairs: pairs_for_tuple });
        }
    }
    Ok(TrainingSetBuild { tuples, strides })
}

/// Parse crop sidecar text: lines of `name top left height width`, where
/// `name` identifies an image pair (see [`load_training_pairs`]).
pub fn parse_crop_lines(text: &str) -> Result<Vec<(String, Rect)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "crop line {}: expected `name top left height width`, got {:?}",
                lineno + 1,
                raw.trim()
            )));
        }
        let nums = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<usize>().map_err(|_| {
                    Error::Format(format!("crop line {}: `{f}` is not a coordinate", lineno + 1))
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        out.push((fields[0].to_string(), Rect::new(nums[0], nums[1], nums[2], nums[3])?));
    }
    if out.is_empty() {
        return Err(Error::Format("crop file lists no image pairs".into()));
    }
    Ok(out)
}

/// Load the image pairs a crop sidecar points at. Each entry `name` expects
/// `<name>.noisy.pgm` and `<name>.highsnr.pgm` in `dir`; a trailing
/// `.noisy.pgm` on the name itself is stripped first.
pub fn load_training_pairs(dir: &Path, crop_file: &Path) -> Result<Vec<ImagePair>> {
    let text = std::fs::read_to_string(crop_file).map_err(|e| Error::io(crop_file, e))?;
    let entries = parse_crop_lines(&text)?;
    let mut pairs = Vec::with_capacity(entries.len());
    for (name, crop) in entries {
        let stem = name.strip_suffix(".noisy.pgm").unwrap_or(&name);
        let noisy = load_image(&dir.join(format!("{stem}.noisy.pgm")))?;
        let high_snr = load_image(&dir.join(format!("{stem}.highsnr.pgm")))?;
        pairs.push(ImagePair::new(noisy, high_snr, crop)?);
    }
    Ok(pairs)
}

/// One evaluation scene: the image to denoise, its neighbors, and the
/// high-SNR reference.
#[derive(Clone, Debug)]
pub struct TestCase {
    pub main: Tensor,
    pub nearby: Vec<Tensor>,
    pub reference: Tensor,
}

impl TestCase {
    /// Model inputs in branch order: main image first, then the neighbors.
    pub fn inputs(&self) -> Vec<Tensor> {
        let mut v = Vec::with_capacity(1 + self.nearby.len());
        v.push(self.main.clone());
        v.extend(self.nearby.iter().cloned());
        v
    }
}

fn find_by_stem(dir: &Path, stem: &str) -> Result<Option<PathBuf>> {
    let mut matches = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.file_stem().is_some_and(|s| s == stem) {
            matches.push(path);
        }
    }
    match matches.len() {
        0 => Ok(None),
        1 => Ok(Some(matches.remove(0))),
        _ => Err(Error::Data(format!(
            "ambiguous test case: multiple files named `{stem}.*` in {}",
            dir.display()
        ))),
    }
}

/// Load a test-case directory laid out as `main.*`, `near1.*` ...
/// `near<T-1>.*`, `ref.*`, validating shapes and neighbor count.
pub fn load_test_case(dir: &Path, branches: usize) -> Result<TestCase> {
    if branches == 0 {
        return Err(Error::Domain("need at least one branch".into()));
    }
    let main_path = find_by_stem(dir, "main")?
        .ok_or_else(|| Error::Data(format!("no `main.*` image in {}", dir.display())))?;
    let ref_path = find_by_stem(dir, "ref")?
        .ok_or_else(|| Error::Data(format!("no `ref.*` reference image in {}", dir.display())))?;
    let main = load_image(&main_path)?;
    let reference = load_image(&ref_path)?;

    let mut nearby = Vec::new();
    for k in 1.. {
        match find_by_stem(dir, &format!("near{k}"))? {
            Some(path) => nearby.push(load_image(&path)?),
            None => break,
        }
    }
    if nearby.len() != branches - 1 {
        return Err(Error::Data(format!(
            "{} provides {} nearby images but the model has {} branches; run with a branch count of {}",
            dir.display(),
            nearby.len(),
            branches,
            nearby.len() + 1
        )));
    }
    for (i, img) in nearby.iter().enumerate() {
        if img.shape() != main.shape() {
            return Err(Error::Data(format!(
                "near{} has shape {:?}, main is {:?}",
                i + 1,
                img.shape(),
                main.shape()
            )));
        }
    }
    if reference.shape() != main.shape() {
        return Err(Error::Data(format!(
            "reference shape {:?} does not match main {:?}",
            reference.shape(),
            main.shape()
        )));
    }
    Ok(TestCase { main, nearby, reference })
}

const ARCHIVE_MAGIC: &[u8; 8] = b"MIFCNDS1";
const ARCHIVE_VERSION: u32 = 1;

/// Serialize tuples to a flat binary archive.
///
/// Layout, all little-endian: magic, u32 version, u32 tuple count,
/// u32 branches, u32 patch size, then per tuple and per branch the window's
/// (u32 row, u32 col) followed by the noisy and high-SNR pixels as f64.
pub fn write_tuple_archive(path: &Path, tuples: &[PatchTuple]) -> Result<()> {
    if tuples.is_empty() {
        return Err(Error::Data("refusing to write an empty tuple archive".into()));
    }
    let branches = tuples[0].branch_count();
    let size = tuples[0].patch_size();
    for tuple in tuples {
        tuple.validate()?;
        if tuple.branch_count() != branches || tuple.patch_size() != size {
            return Err(Error::Data("tuples disagree on branch count or patch size".into()));
        }
    }
    let mut bytes = Vec::with_capacity(
        8 + 16 + tuples.len() * branches * (8 + 2 * size * size * 8),
    );
    bytes.extend_from_slice(ARCHIVE_MAGIC);
    bytes.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tuples.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(branches as u32).to_le_bytes());
    bytes.extend_from_slice(&(size as u32).to_le_bytes());
    for tuple in tuples {
        for pair in &tuple.pairs {
            bytes.extend_from_slice(&(pair.location.0 as u32).to_le_bytes());
            bytes.extend_from_slice(&(pair.location.1 as u32).to_le_bytes());
            for &v in pair.noisy.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            for &v in pair.high_snr.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct ArchiveReader<R> {
    inner: R,
}

impl<R: Read> ArchiveReader<R> {
    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("tuple archive truncated".into()))?;
        Ok(u32::from_le_bytes(buf))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; n * 8];
        self.inner
            .read_exact(&mut raw)
            .map_err(|_| Error::Format("tuple archive truncated".into()))?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn read_tuple_archive(path: &Path) -> Result<Vec<PatchTuple>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = ArchiveReader { inner: std::io::BufReader::new(file) };
    let mut magic = [0u8; 8];
    reader
        .inner
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("tuple archive truncated".into()))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Format(format!("{} is not a tuple archive", path.display())));
    }
    let version = reader.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!(
            "tuple archive version {version} unsupported (expected {ARCHIVE_VERSION})"
        )));
    }
    let count = reader.u32()? as usize;
    let branches = reader.u32()? as usize;
    let size = reader.u32()? as usize;
    if count == 0 || branches == 0 || size == 0 {
        return Err(Error::Format("tuple archive header declares empty contents".into()));
    }
    let mut tuples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pairs = Vec::with_capacity(branches);
        for _ in 0..branches {
            let row = reader.u32()? as usize;
            let col = reader.u32()? as usize;
            let noisy = Tensor::from_vec(&[size, size], reader.f64s(size * size)?)?;
            let high_snr = Tensor::from_vec(&[size, size], reader.f64s(size * size)?)?;
            pairs.push(PatchPair { noisy, high_snr, location: (row, col) });
        }
        tuples.push(PatchTuple { pairs });
    }
    let mut trailing = [0u8; 1];
    if reader.inner.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format("tuple archive has trailing bytes".into()));
    }
    Ok(tuples)
}
