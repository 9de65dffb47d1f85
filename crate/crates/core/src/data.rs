//! Dataset ingestion and task-stream generation.
//!
//! Raw data comes from big-endian IDX files (the MNIST distribution format).
//! A [`TaskStream`] turns one base dataset into a sequence of tasks by
//! permuting pixels, rotating images, or splitting classes. Streams hold the
//! base data plus per-task transform metadata; task datasets are materialized
//! on demand. Materialization is a pure function of `(base data, seed, task)`,
//! so regenerating a task yields bit-identical data — which is also what
//! makes resumed runs and re-evaluations exact.

use std::path::Path;

use crate::error::{ItlError, Result};
use crate::linalg::{derive_seed, Matrix, SeededRng};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Train/test tag carried by a task dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labeled vectors for one task. Labels are local to the task
/// (`0..num_classes`).
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: usize,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy the given rows into a batch.
    pub fn gather(&self, indices: &[u32]) -> (Matrix, Vec<usize>) {
        let cols = self.inputs.cols();
        let mut x = Matrix::zeros(indices.len(), cols);
        let mut y = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            x.row_mut(row).copy_from_slice(self.inputs.row(idx as usize));
            y.push(self.labels[idx as usize]);
        }
        (x, y)
    }
}

/// Unsplit source dataset with global labels.
#[derive(Debug, Clone)]
pub struct BaseData {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl BaseData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let chunk: [u8; 4] = bytes
        .get(offset..offset + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| ItlError::DataFormat {
            path: path.display().to_string(),
            detail: format!("truncated header at byte {offset}"),
        })?;
    Ok(u32::from_be_bytes(chunk))
}

/// Load an IDX image/label file pair: image magic `0x00000803` with dims
/// `[N, 28, 28]`, label magic `0x00000801` with dims `[N]`. Pixels are scaled
/// to `[0, 1]` by dividing by 255; images are flattened to length-784 rows.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<BaseData> {
    let img_bytes = std::fs::read(images_path)
        .map_err(|e| ItlError::io(images_path.display().to_string(), e))?;
    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ItlError::DataFormat {
            path: images_path.display().to_string(),
            detail: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    if rows != 28 || cols != 28 {
        return Err(ItlError::DataFormat {
            path: images_path.display().to_string(),
            detail: format!("expected 28x28 images, got {rows}x{cols}"),
        });
    }
    let expected = 16 + n * rows * cols;
    if img_bytes.len() != expected {
        return Err(ItlError::DataFormat {
            path: images_path.display().to_string(),
            detail: format!("file has {} bytes, expected {expected}", img_bytes.len()),
        });
    }

    let lbl_bytes = std::fs::read(labels_path)
        .map_err(|e| ItlError::io(labels_path.display().to_string(), e))?;
    let magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(ItlError::DataFormat {
            path: labels_path.display().to_string(),
            detail: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(ItlError::DataFormat {
            path: labels_path.display().to_string(),
            detail: format!("{n_labels} labels for {n} images"),
        });
    }
    if lbl_bytes.len() != 8 + n {
        return Err(ItlError::DataFormat {
            path: labels_path.display().to_string(),
            detail: format!("file has {} bytes, expected {}", lbl_bytes.len(), 8 + n),
        });
    }

    let dim = rows * cols;
    let mut inputs = Matrix::zeros(n, dim);
    for (dst, &src) in inputs.data_mut().iter_mut().zip(&img_bytes[16..]) {
        *dst = f64::from(src) / 255.0;
    }
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(BaseData {
        inputs,
        labels,
        num_classes,
    })
}

/// Load the canonical MNIST file pair from a directory.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<BaseData> {
    let (images, labels) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    load_idx(&dir.join(images), &dir.join(labels))
}

/// How one base dataset becomes a stream of tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Permuted,
    Rotated,
    Split,
}

impl StreamKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StreamKind::Permuted => "permuted",
            StreamKind::Rotated => "rotated",
            StreamKind::Split => "split",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "permuted" => Ok(StreamKind::Permuted),
            "rotated" => Ok(StreamKind::Rotated),
            "split" => Ok(StreamKind::Split),
            other => Err(ItlError::invalid(
                "stream kind",
                format!("unknown kind `{other}` (permuted|rotated|split)"),
            )),
        }
    }
}

/// Per-task transform metadata, reproducible from the stream seed.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskTransform {
    /// Pixel gather map: output `j` reads input `perm[j]`.
    Permutation(Vec<u32>),
    /// Rotation angle in degrees.
    Rotation(f64),
    /// Global class ids forming this task, in draw order; local label =
    /// position in this list.
    ClassSet(Vec<usize>),
}

/// An ordered sequence of tasks generated from one base train/test pair.
#[derive(Debug, Clone)]
pub struct TaskStream {
    kind: StreamKind,
    seed: u64,
    base_train: BaseData,
    base_test: BaseData,
    transforms: Vec<TaskTransform>,
}

impl TaskStream {
    /// Permuted stream: task 1 is the identity permutation, tasks `2..=T`
    /// apply independent seeded uniform pixel permutations (train and test
    /// get the same permutation). Labels are unchanged.
    pub fn permuted(base_train: BaseData, base_test: BaseData, tasks: usize, seed: u64) -> Result<Self> {
        check_bases(&base_train, &base_test)?;
        if tasks < 1 {
            return Err(ItlError::invalid("tasks", "need at least one task"));
        }
        let dim = base_train.dim();
        let mut transforms = vec![TaskTransform::Permutation((0..dim as u32).collect())];
        for t in 2..=tasks {
            let mut rng = SeededRng::new(derive_seed(seed, "permute", t as u64, 0));
            transforms.push(TaskTransform::Permutation(rng.permutation(dim)));
        }
        Ok(TaskStream {
            kind: StreamKind::Permuted,
            seed,
            base_train,
            base_test,
            transforms,
        })
    }

    /// Rotated stream: `T` distinct angles drawn uniformly from `[0, 180)`
    /// in task order with the stream seed. Requires 28x28 (784-dim) inputs.
    pub fn rotated(base_train: BaseData, base_test: BaseData, tasks: usize, seed: u64) -> Result<Self> {
        check_bases(&base_train, &base_test)?;
        if tasks < 1 {
            return Err(ItlError::invalid("tasks", "need at least one task"));
        }
        if base_train.dim() != 784 {
            return Err(ItlError::invalid(
                "base data",
                format!("rotation needs 28x28 inputs, got dim {}", base_train.dim()),
            ));
        }
        let mut rng = SeededRng::new(derive_seed(seed, "rotate", 0, 0));
        let mut angles: Vec<f64> = Vec::with_capacity(tasks);
        while angles.len() < tasks {
            let angle = rng.next_f64() * 180.0;
            if !angles.contains(&angle) {
                angles.push(angle);
            }
        }
        Ok(TaskStream {
            kind: StreamKind::Rotated,
            seed,
            base_train,
            base_test,
            transforms: angles.into_iter().map(TaskTransform::Rotation).collect(),
        })
    }

    /// Split stream: a seeded shuffle of the class list is chunked into
    /// consecutive disjoint sets of `classes_per_task`; labels are remapped
    /// to local indices.
    pub fn split(
        base_train: BaseData,
        base_test: BaseData,
        classes_per_task: usize,
        seed: u64,
    ) -> Result<Self> {
        check_bases(&base_train, &base_test)?;
        if classes_per_task < 2 {
            return Err(ItlError::invalid("classes_per_task", "need at least 2"));
        }
        let total = base_train.num_classes;
        if !total.is_multiple_of(classes_per_task) {
            return Err(ItlError::invalid(
                "classes_per_task",
                format!("{total} classes are not divisible by {classes_per_task}"),
            ));
        }
        let mut order: Vec<usize> = (0..total).collect();
        let mut rng = SeededRng::new(derive_seed(seed, "split", 0, 0));
        rng.shuffle(&mut order);
        let transforms = order
            .chunks(classes_per_task)
            .map(|chunk| TaskTransform::ClassSet(chunk.to_vec()))
            .collect();
        Ok(TaskStream {
            kind: StreamKind::Split,
            seed,
            base_train,
            base_test,
            transforms,
        })
    }

    pub fn kind(&self) -> StreamKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_tasks(&self) -> usize {
        self.transforms.len()
    }

    pub fn input_dim(&self) -> usize {
        self.base_train.dim()
    }

    pub fn transform(&self, task: usize) -> Result<&TaskTransform> {
        self.check_task(task)?;
        Ok(&self.transforms[task - 1])
    }

    pub fn num_classes(&self, task: usize) -> Result<usize> {
        match self.transform(task)? {
            TaskTransform::ClassSet(set) => Ok(set.len()),
            _ => Ok(self.base_train.num_classes),
        }
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task == 0 || task > self.transforms.len() {
            return Err(ItlError::UnknownTask {
                task,
                detail: format!("stream has {} tasks", self.transforms.len()),
            });
        }
        Ok(())
    }

    pub fn train_task(&self, task: usize) -> Result<TaskDataset> {
        self.materialize(task, Split::Train)
    }

    pub fn test_task(&self, task: usize) -> Result<TaskDataset> {
        self.materialize(task, Split::Test)
    }

    fn materialize(&self, task: usize, split: Split) -> Result<TaskDataset> {
        self.check_task(task)?;
        let base = match split {
            Split::Train => &self.base_train,
            Split::Test => &self.base_test,
        };
        let ds = match &self.transforms[task - 1] {
            TaskTransform::Permutation(perm) => {
                let n = base.len();
                let dim = base.dim();
                let mut inputs = Matrix::zeros(n, dim);
                for i in 0..n {
                    let src = base.inputs.row(i);
                    let dst = inputs.row_mut(i);
                    for (d, &p) in dst.iter_mut().zip(perm) {
                        *d = src[p as usize];
                    }
                }
                TaskDataset {
                    task_id: task,
                    inputs,
                    labels: base.labels.clone(),
                    num_classes: base.num_classes,
                    split,
                }
            }
            TaskTransform::Rotation(angle) => {
                let n = base.len();
                let mut inputs = Matrix::zeros(n, 784);
                for i in 0..n {
                    let rotated = rotate_image(base.inputs.row(i), *angle);
                    inputs.row_mut(i).copy_from_slice(&rotated);
                }
                TaskDataset {
                    task_id: task,
                    inputs,
                    labels: base.labels.clone(),
                    num_classes: base.num_classes,
                    split,
                }
            }
            TaskTransform::ClassSet(set) => {
                let keep: Vec<usize> = (0..base.len())
                    .filter(|&i| set.contains(&base.labels[i]))
                    .collect();
                let mut inputs = Matrix::zeros(keep.len(), base.dim());
                let mut labels = Vec::with_capacity(keep.len());
                for (row, &i) in keep.iter().enumerate() {
                    inputs.row_mut(row).copy_from_slice(base.inputs.row(i));
                    let local = set
                        .iter()
                        .position(|&c| c == base.labels[i])
                        .expect("filtered on membership");
                    labels.push(local);
                }
                TaskDataset {
                    task_id: task,
                    inputs,
                    labels,
                    num_classes: set.len(),
                    split,
                }
            }
        };
        Ok(ds)
    }
}

fn check_bases(train: &BaseData, test: &BaseData) -> Result<()> {
    if train.dim() != test.dim() {
        return Err(ItlError::shape(
            "task stream",
            format!("train dim {} != test dim {}", train.dim(), test.dim()),
        ));
    }
    if train.is_empty() || test.is_empty() {
        return Err(ItlError::invalid("base data", "empty dataset"));
    }
    Ok(())
}

/// Exact sine/cosine in degrees; quadrant angles map to exact grid values so
/// 90/180/270-degree rotations are exact grid permutations.
fn sin_cos_deg(angle_deg: f64) -> (f64, f64) {
    let norm = angle_deg.rem_euclid(360.0);
    if norm == 0.0 {
        (0.0, 1.0)
    } else if norm == 90.0 {
        (1.0, 0.0)
    } else if norm == 180.0 {
        (0.0, -1.0)
    } else if norm == 270.0 {
        (-1.0, 0.0)
    } else {
        angle_deg.to_radians().sin_cos()
    }
}

/// Rotate a 28x28 image (flattened, row-major) about the center `(13.5, 13.5)`
/// by inverse mapping with bilinear interpolation. Out-of-bounds samples read
/// as 0; output is clamped to `[0, 1]`.
pub fn rotate_image(img: &[f64], angle_deg: f64) -> Vec<f64> {
    assert_eq!(img.len(), 784, "rotate_image expects a 28x28 image");
    let (sin, cos) = sin_cos_deg(angle_deg);
    let center = 13.5;
    let sample = |y: isize, x: isize| -> f64 {
        if (0..28).contains(&y) && (0..28).contains(&x) {
            img[y as usize * 28 + x as usize]
        } else {
            0.0
        }
    };
    let mut out = vec![0.0; 784];
    for row in 0..28 {
        for col in 0..28 {
            // Source position: rotate the destination offset by -angle.
            let dx = col as f64 - center;
            let dy = row as f64 - center;
            let sx = cos * dx + sin * dy + center;
            let sy = -sin * dx + cos * dy + center;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * sample(yi, xi) + fx * sample(yi, xi + 1))
                + fy * ((1.0 - fx) * sample(yi + 1, xi) + fx * sample(yi + 1, xi + 1));
            out[row * 28 + col] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Seeded per-epoch batching: shuffle all indices, chunk by `batch_size`,
/// keep the final partial batch.
pub fn batches(dataset: &TaskDataset, batch_size: usize, epoch_seed: u64) -> Vec<Vec<u32>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<u32> = (0..dataset.len() as u32).collect();
    let mut rng = SeededRng::new(epoch_seed);
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[u32]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn synth_base(n: usize, dim: usize, num_classes: usize, seed: u64) -> BaseData {
        let mut rng = SeededRng::new(seed);
        let mut inputs = Matrix::zeros(n, dim);
        for v in inputs.data_mut() {
            *v = rng.next_f64();
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(num_classes as u64) as usize).collect();
        BaseData {
            inputs,
            labels,
            num_classes,
        }
    }

    fn synth_base28(n: usize, num_classes: usize, seed: u64) -> BaseData {
        synth_base(n, 784, num_classes, seed)
    }

    fn write_idx_pair(dir: &Path, images: &[u8], labels: &[u8], n: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("images-idx3-ubyte");
        let lbl_path = dir.join("labels-idx1-ubyte");
        let mut f = std::fs::File::create(&img_path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(images).unwrap();
        let mut f = std::fs::File::create(&lbl_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn load_idx_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<u8> = (0..2 * 784).map(|i| (i % 256) as u8).collect();
        let labels = vec![3u8, 7u8];
        let (img, lbl) = write_idx_pair(dir.path(), &images, &labels, 2);
        let base = load_idx(&img, &lbl).unwrap();
        assert_eq!(base.len(), 2);
        assert_eq!(base.dim(), 784);
        assert_eq!(base.labels, vec![3, 7]);
        assert_eq!(base.num_classes, 8);
        assert_eq!(base.inputs.get(0, 0), 0.0);
        assert_eq!(base.inputs.get(0, 255), 1.0);
        assert!((base.inputs.get(0, 128) - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn load_idx_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<u8> = vec![0; 784];
        let labels = vec![1u8];
        let (img, lbl) = write_idx_pair(dir.path(), &images, &labels, 1);
        // A label file carrying the image magic must be rejected.
        assert!(load_idx(&img, &img).is_err());
        assert!(load_idx(&lbl, &lbl).is_err());
    }

    #[test]
    fn load_idx_rejects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<u8> = vec![0; 784];
        let labels = vec![1u8, 2u8];
        // 1 image but 2 labels
        let (img, lbl) = write_idx_pair(dir.path(), &images, &labels, 1);
        let bad_lbl = dir.path().join("labels2");
        let mut f = std::fs::File::create(&bad_lbl).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&labels).unwrap();
        assert!(load_idx(&img, &bad_lbl).is_err());

        // truncated image payload
        let short_img = dir.path().join("short-images");
        let mut f = std::fs::File::create(&short_img).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&1u32.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(&28u32.to_be_bytes()).unwrap();
        f.write_all(&images[..100]).unwrap();
        assert!(load_idx(&short_img, &lbl).is_err());
    }

    #[test]
    fn permuted_stream_contract() {
        let stream = TaskStream::permuted(synth_base(30, 16, 4, 1), synth_base(10, 16, 4, 2), 20, 7).unwrap();
        assert_eq!(stream.num_tasks(), 20);

        // Task 1 is the identity: inputs bit-equal the base.
        let t1 = stream.train_task(1).unwrap();
        let base = synth_base(30, 16, 4, 1);
        assert_eq!(t1.inputs.data(), base.inputs.data());
        assert_eq!(t1.labels, base.labels);

        // Each permutation is a bijection.
        for t in 1..=20 {
            if let TaskTransform::Permutation(p) = stream.transform(t).unwrap() {
                let mut sorted = p.clone();
                sorted.sort_unstable();
                let expect: Vec<u32> = (0..16).collect();
                assert_eq!(sorted, expect);
            } else {
                panic!("wrong transform kind");
            }
        }

        // Train and test share the permutation.
        let t3_train = stream.train_task(3).unwrap();
        if let TaskTransform::Permutation(p) = stream.transform(3).unwrap() {
            assert_eq!(t3_train.inputs.get(0, 0), base.inputs.get(0, p[0] as usize));
        }
    }

    #[test]
    fn permuted_stream_regenerates_bit_identically() {
        let mk = || TaskStream::permuted(synth_base(12, 9, 3, 5), synth_base(8, 9, 3, 6), 4, 99).unwrap();
        let (a, b) = (mk(), mk());
        for t in 1..=4 {
            assert_eq!(
                a.train_task(t).unwrap().inputs.data(),
                b.train_task(t).unwrap().inputs.data()
            );
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let base = synth_base28(1, 2, 3);
        let img = base.inputs.row(0);
        let out = rotate_image(img, 0.0);
        assert_eq!(out.as_slice(), img);
    }

    #[test]
    fn rotate_180_reverses_both_axes() {
        let base = synth_base28(1, 2, 4);
        let img = base.inputs.row(0);
        let out = rotate_image(img, 180.0);
        for r in 0..28 {
            for c in 0..28 {
                assert_eq!(out[r * 28 + c], img[(27 - r) * 28 + (27 - c)], "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn rotate_matches_scalar_inverse_map_oracle() {
        let base = synth_base28(1, 2, 5);
        let img = base.inputs.row(0);
        let angle = 37.3_f64;
        let out = rotate_image(img, angle);

        // Independent oracle: same inverse-map definition evaluated with
        // explicit corner weights.
        let theta = angle.to_radians();
        let (s, c) = theta.sin_cos();
        let read = |y: f64, x: f64| -> f64 {
            let (yi, xi) = (y as isize, x as isize);
            if y >= 0.0 && y < 28.0 && x >= 0.0 && x < 28.0 {
                img[yi as usize * 28 + xi as usize]
            } else {
                0.0
            }
        };
        for r in 0..28 {
            for col in 0..28 {
                let dx = col as f64 - 13.5;
                let dy = r as f64 - 13.5;
                let sx = c * dx + s * dy + 13.5;
                let sy = -s * dx + c * dy + 13.5;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w01 = fx * (1.0 - fy);
                let w10 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                let expect = (w00 * read(y0, x0)
                    + w01 * read(y0, x0 + 1.0)
                    + w10 * read(y0 + 1.0, x0)
                    + w11 * read(y0 + 1.0, x0 + 1.0))
                .clamp(0.0, 1.0);
                let got = out[r * 28 + col];
                assert!((got - expect).abs() <= 1e-12, "pixel ({r},{col}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn rotate_preserves_unit_range() {
        let base = synth_base28(3, 2, 6);
        for i in 0..3 {
            for angle in [13.7, 91.2, 179.9] {
                let out = rotate_image(base.inputs.row(i), angle);
                assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn rotated_stream_contract() {
        let stream = TaskStream::rotated(synth_base28(10, 3, 7), synth_base28(5, 3, 8), 20, 11).unwrap();
        assert_eq!(stream.num_tasks(), 20);
        let mut angles = Vec::new();
        for t in 1..=20 {
            if let TaskTransform::Rotation(a) = stream.transform(t).unwrap() {
                assert!((0.0..180.0).contains(a));
                angles.push(*a);
            }
        }
        let unique: std::collections::BTreeSet<u64> = angles.iter().map(|a| a.to_bits()).collect();
        assert_eq!(unique.len(), 20, "angles must be distinct");

        let again = TaskStream::rotated(synth_base28(10, 3, 7), synth_base28(5, 3, 8), 20, 11).unwrap();
        for t in 1..=20 {
            assert_eq!(stream.transform(t).unwrap(), again.transform(t).unwrap());
        }
    }

    #[test]
    fn rotated_stream_requires_784() {
        let r = TaskStream::rotated(synth_base(4, 100, 2, 1), synth_base(4, 100, 2, 2), 3, 0);
        assert!(r.is_err());
    }

    #[test]
    fn split_stream_partitions_classes() {
        let stream = TaskStream::split(synth_base(200, 8, 10, 9), synth_base(100, 8, 10, 10), 2, 13).unwrap();
        assert_eq!(stream.num_tasks(), 5);
        let mut seen = std::collections::BTreeSet::new();
        for t in 1..=5 {
            if let TaskTransform::ClassSet(set) = stream.transform(t).unwrap() {
                assert_eq!(set.len(), 2);
                for &c in set {
                    assert!(seen.insert(c), "class {c} appears twice");
                }
            }
            let ds = stream.train_task(t).unwrap();
            assert_eq!(ds.num_classes, 2);
            assert!(ds.labels.iter().all(|&y| y < 2));
        }
        assert_eq!(seen.len(), 10, "classes must be exhaustive");
    }

    #[test]
    fn split_stream_twenty_tasks_of_five() {
        let stream = TaskStream::split(synth_base(400, 6, 100, 20), synth_base(200, 6, 100, 21), 5, 14).unwrap();
        assert_eq!(stream.num_tasks(), 20);
    }

    #[test]
    fn split_remaps_labels_consistently() {
        let stream = TaskStream::split(synth_base(300, 4, 10, 30), synth_base(100, 4, 10, 31), 5, 15).unwrap();
        let base = synth_base(300, 4, 10, 30);
        let ds = stream.train_task(1).unwrap();
        if let TaskTransform::ClassSet(set) = stream.transform(1).unwrap() {
            let mut row = 0;
            for i in 0..base.len() {
                if set.contains(&base.labels[i]) {
                    assert_eq!(ds.labels[row], set.iter().position(|&c| c == base.labels[i]).unwrap());
                    assert_eq!(ds.inputs.row(row), base.inputs.row(i));
                    row += 1;
                }
            }
            assert_eq!(row, ds.len());
        }
    }

    #[test]
    fn split_rejects_indivisible() {
        let r = TaskStream::split(synth_base(40, 4, 10, 1), synth_base(20, 4, 10, 2), 3, 0);
        assert!(r.is_err());
    }

    #[test]
    fn batches_shape_and_partition() {
        let ds = TaskDataset {
            task_id: 1,
            inputs: Matrix::zeros(60_000, 1),
            labels: vec![0; 60_000],
            num_classes: 2,
            split: Split::Train,
        };
        let bs = batches(&ds, 128, 42);
        assert_eq!(bs.len(), 469);
        assert_eq!(bs.last().unwrap().len(), 96);
        assert!(bs[..468].iter().all(|b| b.len() == 128));

        let same = batches(&ds, 128, 42);
        assert_eq!(bs, same);
        let different = batches(&ds, 128, 43);
        assert_ne!(bs, different);

        let mut all: Vec<u32> = bs.into_iter().flatten().collect();
        all.sort_unstable();
        let expect: Vec<u32> = (0..60_000).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn gather_copies_rows() {
        let mut inputs = Matrix::zeros(3, 2);
        inputs.row_mut(0).copy_from_slice(&[1.0, 2.0]);
        inputs.row_mut(1).copy_from_slice(&[3.0, 4.0]);
        inputs.row_mut(2).copy_from_slice(&[5.0, 6.0]);
        let ds = TaskDataset {
            task_id: 1,
            inputs,
            labels: vec![0, 1, 0],
            num_classes: 2,
            split: Split::Train,
        };
        let (x, y) = ds.gather(&[2, 0]);
        assert_eq!(x.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(y, vec![0, 0]);
    }
}
