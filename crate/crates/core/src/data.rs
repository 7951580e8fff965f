//! Skeleton-sequence ingestion: the `.skl` text format, bilinear resampling
//! onto the fixed frame/joint grid, per-plane normalization, and a seeded
//! synthetic corpus generator for desk-scale experiments.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Debug)]
pub enum DataError {
    Io(io::Error),
    Parse { line: usize, message: String },
    NonFinite { line: usize },
    InvalidSequence(String),
    InvalidSpec(String),
    EmptyDataset,
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "data i/o error: {e}"),
            Self::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Self::NonFinite { line } => write!(f, "non-finite coordinate at line {line}"),
            Self::InvalidSequence(msg) => write!(f, "invalid sequence: {msg}"),
            Self::InvalidSpec(msg) => write!(f, "invalid synth spec: {msg}"),
            Self::EmptyDataset => write!(f, "dataset is empty"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

/// A raw recording: per-frame joint triples plus the class label.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub frames: Vec<Vec<[f64; 3]>>,
    pub label: usize,
    pub subject_id: Option<String>,
}

impl SkeletonSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }
}

/// One sample on the fixed grid: three normalized `T×N` coordinate planes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSample {
    pub planes: [Tensor<f64>; 3],
    pub label: usize,
}

/// Parses one `.skl` file. Each record is a header line
/// `F J label [subject_id]` followed by `F` lines of `3·J` floats ordered
/// `x1 y1 z1 x2 y2 z2 …`; `#` starts a comment line. Files normally hold a
/// single record but trailing records are accepted.
pub fn load_skl(path: &Path) -> Result<Vec<SkeletonSequence>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut sequences = Vec::new();
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        });

    while let Some((line_no, header)) = lines.next() {
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(DataError::Parse {
                line: line_no,
                message: format!(
                    "header needs 'F J label [subject_id]', got {} fields",
                    fields.len()
                ),
            });
        }
        let parse_count = |s: &str, what: &str| -> Result<usize, DataError> {
            s.parse().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("bad {what} '{s}'"),
            })
        };
        let f_count = parse_count(fields[0], "frame count")?;
        let j_count = parse_count(fields[1], "joint count")?;
        let label = parse_count(fields[2], "label")?;
        let subject_id = fields.get(3).map(|s| s.to_string());
        if f_count < 2 {
            return Err(DataError::InvalidSequence(format!(
                "sequence at line {line_no} needs at least 2 frames, has {f_count}"
            )));
        }

        let mut frames = Vec::with_capacity(f_count);
        for _ in 0..f_count {
            let (row_line, row) = lines.next().ok_or(DataError::Parse {
                line: line_no,
                message: format!("expected {f_count} frame rows, file ended early"),
            })?;
            let values: Vec<&str> = row.split_whitespace().collect();
            if values.len() != 3 * j_count {
                return Err(DataError::Parse {
                    line: row_line,
                    message: format!("expected {} floats, got {}", 3 * j_count, values.len()),
                });
            }
            let mut joints = Vec::with_capacity(j_count);
            for triple in values.chunks(3) {
                let mut joint = [0.0; 3];
                for (d, s) in triple.iter().enumerate() {
                    let v: f64 = s.parse().map_err(|_| DataError::Parse {
                        line: row_line,
                        message: format!("bad float '{s}'"),
                    })?;
                    if !v.is_finite() {
                        return Err(DataError::NonFinite { line: row_line });
                    }
                    joint[d] = v;
                }
                joints.push(joint);
            }
            frames.push(joints);
        }
        sequences.push(SkeletonSequence {
            frames,
            label,
            subject_id,
        });
    }
    Ok(sequences)
}

/// Writes sequences in the `.skl` format with 9 significant digits.
pub fn save_skl(path: &Path, sequences: &[SkeletonSequence]) -> Result<(), DataError> {
    let mut out = String::new();
    for s in sequences {
        out.push_str(&format!("{} {} {}", s.num_frames(), s.num_joints(), s.label));
        if let Some(id) = &s.subject_id {
            out.push(' ');
            out.push_str(id);
        }
        out.push('\n');
        for frame in &s.frames {
            let row: Vec<String> = frame
                .iter()
                .flat_map(|j| j.iter().map(|v| format!("{v:.9e}")))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

fn bilinear_resize(src: &[f64], f: usize, j: usize, t: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * n];
    let pos = |i: usize, len_out: usize, len_in: usize| -> f64 {
        if len_out <= 1 {
            0.0
        } else {
            i as f64 * (len_in - 1) as f64 / (len_out - 1) as f64
        }
    };
    for ti in 0..t {
        let y = pos(ti, t, f);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(f - 1);
        let fy = y - y0 as f64;
        for ni in 0..n {
            let x = pos(ni, n, j);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(j - 1);
            let fx = x - x0 as f64;
            let v00 = src[y0 * j + x0];
            let v01 = src[y0 * j + x1];
            let v10 = src[y1 * j + x0];
            let v11 = src[y1 * j + x1];
            out[ti * n + ni] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}

/// Resamples a recording onto the `T×N` grid (frame and joint indices both
/// treated as continuous axes) and z-normalizes each plane. Planes with
/// standard deviation below 1e-8 are centered but left unscaled.
pub fn resize_sequence(s: &SkeletonSequence, t: usize, n: usize) -> Result<GridSample, DataError> {
    let (f, j) = (s.num_frames(), s.num_joints());
    if f < 2 || j < 2 {
        return Err(DataError::InvalidSequence(format!(
            "resampling needs at least 2 frames and 2 joints, got {f}x{j}"
        )));
    }
    if s.frames.iter().any(|fr| fr.len() != j) {
        return Err(DataError::InvalidSequence(
            "frames have inconsistent joint counts".into(),
        ));
    }
    let mut planes = Vec::with_capacity(3);
    for d in 0..3 {
        let src: Vec<f64> = s
            .frames
            .iter()
            .flat_map(|fr| fr.iter().map(move |joint| joint[d]))
            .collect();
        let mut grid = bilinear_resize(&src, f, j, t, n);
        let mean = grid.iter().sum::<f64>() / grid.len() as f64;
        let var = grid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / grid.len() as f64;
        let std = var.sqrt();
        if std < 1e-8 {
            for v in &mut grid {
                *v -= mean;
            }
        } else {
            for v in &mut grid {
                *v = (*v - mean) / std;
            }
        }
        planes.push(Tensor::new(vec![t, n], grid).expect("grid shape"));
    }
    Ok(GridSample {
        planes: [
            planes[0].clone(),
            planes[1].clone(),
            planes[2].clone(),
        ],
        label: s.label,
    })
}

/// Parameters of the synthetic action corpus. Classes are separated by
/// motion frequency and per-joint spatial signatures; speed warp, rotation
/// jitter and additive noise make samples within a class vary.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub joints: usize,
    pub noise_sigma: f64,
    pub speed_warp: f64,
    pub rotation_jitter: f64,
    pub freq_base: f64,
    pub freq_step: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 50,
            frames_min: 40,
            frames_max: 80,
            joints: 25,
            noise_sigma: 0.05,
            speed_warp: 0.1,
            rotation_jitter: 0.1,
            freq_base: 1.0,
            freq_step: 0.7,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(DataError::InvalidSpec("need classes and samples".into()));
        }
        if self.frames_min < 2 || self.frames_max < self.frames_min {
            return Err(DataError::InvalidSpec(format!(
                "bad frame range {}..{}",
                self.frames_min, self.frames_max
            )));
        }
        if self.joints < 2 {
            return Err(DataError::InvalidSpec("need at least 2 joints".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::InvalidSpec("noise sigma must be >= 0".into()));
        }
        if self.freq_step == 0.0 {
            return Err(DataError::InvalidSpec(
                "freq_step 0 would give classes identical frequencies".into(),
            ));
        }
        Ok(())
    }
}

struct ClassMotion {
    frequency: f64,
    // Indexed [joint][coordinate].
    amplitude: Vec<[f64; 3]>,
    phase: Vec<[f64; 3]>,
    offset: Vec<[f64; 3]>,
}

fn rotation_matrix(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    // Rz · Ry · Rx
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Generates the raw sequences of a corpus, deterministically from the
/// spec's seed, grouped class by class.
pub fn synth_sequences(spec: &SynthSpec) -> Result<Vec<SkeletonSequence>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("sigma validated non-negative");

    let motions: Vec<ClassMotion> = (0..spec.num_classes)
        .map(|c| {
            let frequency = spec.freq_base + c as f64 * spec.freq_step;
            let mut amplitude = Vec::with_capacity(spec.joints);
            let mut phase = Vec::with_capacity(spec.joints);
            let mut offset = Vec::with_capacity(spec.joints);
            for _ in 0..spec.joints {
                amplitude.push([
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(0.5..1.5),
                ]);
                phase.push([
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                ]);
                offset.push([
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]);
            }
            ClassMotion {
                frequency,
                amplitude,
                phase,
                offset,
            }
        })
        .collect();

    let mut sequences = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (label, motion) in motions.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let f_count = if spec.frames_min == spec.frames_max {
                spec.frames_min
            } else {
                rng.gen_range(spec.frames_min..=spec.frames_max)
            };
            let speed = if spec.speed_warp > 0.0 {
                rng.gen_range(1.0 - spec.speed_warp..1.0 + spec.speed_warp)
            } else {
                1.0
            };
            let rot = if spec.rotation_jitter > 0.0 {
                let j = spec.rotation_jitter;
                rotation_matrix(
                    rng.gen_range(-j..j),
                    rng.gen_range(-j..j),
                    rng.gen_range(-j..j),
                )
            } else {
                rotation_matrix(0.0, 0.0, 0.0)
            };

            let mut frames = Vec::with_capacity(f_count);
            for t in 0..f_count {
                let tt = t as f64 / f_count as f64;
                let mut joints = Vec::with_capacity(spec.joints);
                for j in 0..spec.joints {
                    let mut p = [0.0; 3];
                    for (d, pd) in p.iter_mut().enumerate() {
                        *pd = motion.amplitude[j][d]
                            * (std::f64::consts::TAU * motion.frequency * speed * tt
                                + motion.phase[j][d])
                                .sin()
                            + motion.offset[j][d];
                    }
                    let mut rotated = [0.0; 3];
                    for (d, rd) in rotated.iter_mut().enumerate() {
                        *rd = rot[d][0] * p[0] + rot[d][1] * p[1] + rot[d][2] * p[2];
                        if spec.noise_sigma > 0.0 {
                            *rd += noise.sample(&mut rng);
                        }
                    }
                    joints.push(rotated);
                }
                frames.push(joints);
            }
            sequences.push(SkeletonSequence {
                frames,
                label,
                subject_id: None,
            });
        }
    }
    Ok(sequences)
}

/// Generates the corpus and resamples it onto the `T×N` grid, split 80/20
/// stratified by class (per-class sample order is generation order).
pub fn synth_generate(
    spec: &SynthSpec,
    t: usize,
    n: usize,
) -> Result<(Vec<GridSample>, Vec<GridSample>), DataError> {
    let sequences = synth_sequences(spec)?;
    let train_per_class = spec.samples_per_class * 4 / 5;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        let within_class = i % spec.samples_per_class;
        let grid = resize_sequence(seq, t, n)?;
        if within_class < train_per_class {
            train.push(grid);
        } else {
            test.push(grid);
        }
    }
    Ok((train, test))
}

/// On-disk corpus layout: one `.skl` file per sequence plus a `corpus.tsv`
/// manifest with `path<TAB>split` rows.
pub fn write_corpus(
    dir: &Path,
    train: &[SkeletonSequence],
    test: &[SkeletonSequence],
) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut write_split = |split: &str, seqs: &[SkeletonSequence]| -> Result<(), DataError> {
        for (i, seq) in seqs.iter().enumerate() {
            let name = format!("{split}_c{}_{i:04}.skl", seq.label);
            save_skl(&dir.join(&name), std::slice::from_ref(seq))?;
            manifest.push_str(&format!("{name}\t{split}\n"));
        }
        Ok(())
    };
    write_split("train", train)?;
    write_split("test", test)?;
    fs::write(dir.join("corpus.tsv"), manifest)?;
    Ok(())
}

/// Loads a corpus directory via its manifest; returns (train, test).
pub fn load_corpus(dir: &Path) -> Result<(Vec<SkeletonSequence>, Vec<SkeletonSequence>), DataError> {
    let manifest_path = dir.join("corpus.tsv");
    let text = fs::read_to_string(&manifest_path)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (path, split) = match (fields.next(), fields.next()) {
            (Some(p), Some(s)) => (p, s),
            _ => {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: "manifest rows need 'path<TAB>split'".into(),
                })
            }
        };
        let seqs = load_skl(&dir.join(path))?;
        match split {
            "train" => train.extend(seqs),
            "test" => test.extend(seqs),
            other => {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("unknown split '{other}'"),
                })
            }
        }
    }
    if train.is_empty() && test.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok((train, test))
}

/// Resamples both splits of an on-disk corpus onto the grid.
pub fn load_corpus_grids(
    dir: &Path,
    t: usize,
    n: usize,
) -> Result<(Vec<GridSample>, Vec<GridSample>), DataError> {
    let (train_seq, test_seq) = load_corpus(dir)?;
    let train = train_seq
        .iter()
        .map(|s| resize_sequence(s, t, n))
        .collect::<Result<_, _>>()?;
    let test = test_seq
        .iter()
        .map(|s| resize_sequence(s, t, n))
        .collect::<Result<_, _>>()?;
    Ok((train, test))
}

/// Sequence paths referenced by a corpus manifest (used for split hashes).
pub fn corpus_manifest_bytes(dir: &Path) -> Result<Vec<u8>, DataError> {
    Ok(fs::read(dir.join("corpus.tsv"))?)
}

pub fn default_corpus_path() -> PathBuf {
    PathBuf::from("corpus")
}
