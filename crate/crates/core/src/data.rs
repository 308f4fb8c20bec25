//! Frames of softmax-normalised unary scores, padding, and the `MPDS1`
//! dataset file.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};

use crate::config::{fingerprint_of, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scene, per-person action and per-person pose scores at one point of the
/// network. `actions` is `M_max × |H|`, `poses` is `M_max × |Z|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores<S> {
    pub scene: Array1<S>,
    pub actions: Array2<S>,
    pub poses: Array2<S>,
}

impl<S: Scalar> Scores<S> {
    pub fn zeros(scenes: usize, actions: usize, poses: usize, persons: usize) -> Self {
        Scores {
            scene: Array1::zeros(scenes),
            actions: Array2::zeros((persons, actions)),
            poses: Array2::zeros((persons, poses)),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Scores {
            scene: Array1::zeros(other.scene.raw_dim()),
            actions: Array2::zeros(other.actions.raw_dim()),
            poses: Array2::zeros(other.poses.raw_dim()),
        }
    }

    pub fn persons(&self) -> usize {
        self.actions.nrows()
    }

    /// Every score in a fixed order: scene, then per person actions and poses.
    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.scene
            .iter()
            .chain(self.actions.iter())
            .chain(self.poses.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.scene
            .iter_mut()
            .chain(self.actions.iter_mut())
            .chain(self.poses.iter_mut())
    }

    /// Softmax of the scene vector and of each active person's action and
    /// pose rows; inactive rows are left at zero.
    pub fn normalized(&self, mask: &[bool]) -> Self {
        let mut out = Scores::zeros_like(self);
        softmax_into(self.scene.view(), out.scene.view_mut());
        for (m, &active) in mask.iter().enumerate() {
            if !active {
                continue;
            }
            softmax_into(self.actions.row(m), out.actions.row_mut(m));
            if self.poses.ncols() > 0 {
                softmax_into(self.poses.row(m), out.poses.row_mut(m));
            }
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> Scores<T> {
        Scores {
            scene: self.scene.mapv(|v| T::of(v.as_f64())),
            actions: self.actions.mapv(|v| T::of(v.as_f64())),
            poses: self.poses.mapv(|v| T::of(v.as_f64())),
        }
    }
}

/// Numerically stable softmax: `exp(v_i − max v) / Σ_j exp(v_j − max v)`.
pub fn softmax<S: Scalar>(v: ArrayView1<S>) -> Array1<S> {
    let mut out = Array1::zeros(v.len());
    softmax_into(v, out.view_mut());
    out
}

pub(crate) fn softmax_into<S: Scalar>(v: ArrayView1<S>, mut out: ArrayViewMut1<S>) {
    if v.is_empty() {
        return;
    }
    let max = v.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut total = S::zero();
    for (o, &x) in out.iter_mut().zip(v.iter()) {
        *o = (x - max).exp();
        total += *o;
    }
    out.mapv_inplace(|e| e / total);
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(v: ArrayView1<S>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Ground-truth labels of a frame. Entries of inactive persons are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Truth {
    pub scene: Option<usize>,
    pub actions: Vec<Option<usize>>,
    pub poses: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance<S> {
    /// s⁽⁰⁾, a⁽⁰⁾, r⁽⁰⁾: probability vectors from the unary score source.
    pub unary: Scores<S>,
    pub person_mask: Vec<bool>,
    pub truth: Truth,
}

impl<S: Scalar> SceneInstance<S> {
    /// An unpadded frame whose every row is a real person.
    pub fn new(scene: Array1<S>, actions: Array2<S>, poses: Array2<S>) -> Self {
        let persons = actions.nrows();
        assert_eq!(poses.nrows(), persons, "action and pose rows disagree");
        SceneInstance {
            unary: Scores {
                scene,
                actions,
                poses,
            },
            person_mask: vec![true; persons],
            truth: Truth {
                scene: None,
                actions: vec![None; persons],
                poses: vec![None; persons],
            },
        }
    }

    pub fn with_truth(mut self, truth: Truth) -> Self {
        self.truth = truth;
        self
    }

    pub fn slots(&self) -> usize {
        self.person_mask.len()
    }

    pub fn active_persons(&self) -> usize {
        self.person_mask.iter().filter(|&&a| a).count()
    }

    pub fn cast<T: Scalar>(&self) -> SceneInstance<T> {
        SceneInstance {
            unary: self.unary.cast(),
            person_mask: self.person_mask.clone(),
            truth: self.truth.clone(),
        }
    }
}

/// Pads a frame of `M` person rows to `M_max` with zero rows whose mask is
/// false. Existing rows are copied bit for bit.
pub fn pad_instance<S: Scalar>(inst: &SceneInstance<S>, cfg: &ModelConfig) -> Result<SceneInstance<S>> {
    let persons = inst.slots();
    let max = cfg.max_persons;
    if persons > max {
        return Err(Error::TooManyPersons {
            persons,
            max_persons: max,
        });
    }
    let h = inst.unary.actions.ncols();
    let z = inst.unary.poses.ncols();
    let mut out = SceneInstance {
        unary: Scores {
            scene: inst.unary.scene.clone(),
            actions: Array2::zeros((max, h)),
            poses: Array2::zeros((max, z)),
        },
        person_mask: vec![false; max],
        truth: Truth {
            scene: inst.truth.scene,
            actions: vec![None; max],
            poses: vec![None; max],
        },
    };
    for m in 0..persons {
        out.unary.actions.row_mut(m).assign(&inst.unary.actions.row(m));
        out.unary.poses.row_mut(m).assign(&inst.unary.poses.row(m));
        out.person_mask[m] = inst.person_mask[m];
        out.truth.actions[m] = inst.truth.actions.get(m).copied().flatten();
        out.truth.poses[m] = inst.truth.poses.get(m).copied().flatten();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetShape {
    pub scenes: usize,
    pub actions: usize,
    pub poses: usize,
    pub max_persons: usize,
}

impl DatasetShape {
    pub fn of(cfg: &ModelConfig) -> Self {
        let ls = cfg.label_spaces;
        DatasetShape {
            scenes: ls.num_scenes,
            actions: ls.num_actions,
            poses: ls.num_poses,
            max_persons: cfg.max_persons,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_of(self.scenes, self.actions, self.poses, self.max_persons)
    }

    /// Checks every dimension against `cfg`, naming the first that differs.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let want = DatasetShape::of(cfg);
        for (what, found, expected) in [
            ("G", self.scenes, want.scenes),
            ("H", self.actions, want.actions),
            ("Z", self.poses, want.poses),
            ("M", self.max_persons, want.max_persons),
        ] {
            if found != expected {
                return Err(Error::DimensionMismatch {
                    what,
                    found,
                    expected,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub shape: DatasetShape,
    pub instances: Vec<SceneInstance<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(shape: DatasetShape) -> Self {
        Dataset {
            shape,
            instances: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        self.shape.fingerprint()
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            shape: self.shape,
            instances: self.instances.iter().map(SceneInstance::cast).collect(),
        }
    }

    /// Splits off the first `n` instances as one dataset and the rest as another.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        (
            Dataset {
                shape: self.shape,
                instances: self.instances[..n].to_vec(),
            },
            Dataset {
                shape: self.shape,
                instances: self.instances[n..].to_vec(),
            },
        )
    }

    /// Serialises to the `MPDS1` text format. Floats use the shortest
    /// decimal form that parses back to the identical `f64`.
    pub fn to_text(&self) -> String {
        let sh = self.shape;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "MPDS1 G={} H={} Z={} M={} N={}",
            sh.scenes,
            sh.actions,
            sh.poses,
            sh.max_persons,
            self.len()
        );
        let label = |l: Option<usize>| l.map_or(-1, |v| v as i64);
        for inst in &self.instances {
            let _ = writeln!(out, "I {}", label(inst.truth.scene));
            write_floats(&mut out, 'S', inst.unary.scene.iter());
            for m in 0..sh.max_persons {
                let _ = writeln!(
                    out,
                    "P {} {} {} {}",
                    m,
                    u8::from(inst.person_mask[m]),
                    label(inst.truth.actions[m]),
                    label(inst.truth.poses[m])
                );
                write_floats(&mut out, 'A', inst.unary.actions.row(m).iter());
                if sh.poses > 0 {
                    write_floats(&mut out, 'R', inst.unary.poses.row(m).iter());
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
        let (shape, count) = parse_header(header)?;
        let mut ds = Dataset::new(shape);
        for index in 0..count {
            ds.instances.push(parse_instance(&mut lines, shape, index)?);
        }
        if let Some(extra) = lines.next() {
            return Err(Error::MalformedRecord {
                index: count,
                msg: format!("trailing content after {count} records: `{extra}`"),
            });
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Loads a dataset and checks its header against `cfg`.
pub fn load_dataset<S: Scalar>(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Dataset<S>> {
    let ds = Dataset::load(path)?;
    ds.shape.check(cfg)?;
    Ok(ds)
}

pub fn save_dataset<S: Scalar>(ds: &Dataset<S>, path: impl AsRef<Path>) -> Result<()> {
    ds.save(path)
}

/// Writes through a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_floats<'a, S: Scalar>(out: &mut String, tag: char, values: impl Iterator<Item = &'a S>) {
    out.push(tag);
    for v in values {
        let _ = write!(out, " {}", v.as_f64());
    }
    out.push('\n');
}

fn parse_header(line: &str) -> Result<(DatasetShape, usize)> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("MPDS1") {
        return Err(Error::MalformedHeader(format!("expected MPDS1 magic in `{line}`")));
    }
    let mut fields = [None; 5];
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::MalformedHeader(format!("bad field `{part}`")))?;
        let slot = match key {
            "G" => 0,
            "H" => 1,
            "Z" => 2,
            "M" => 3,
            "N" => 4,
            _ => return Err(Error::MalformedHeader(format!("unknown field `{key}`"))),
        };
        fields[slot] = Some(
            value
                .parse::<usize>()
                .map_err(|_| Error::MalformedHeader(format!("bad value in `{part}`")))?,
        );
    }
    let get = |i: usize, name: &str| {
        fields[i].ok_or_else(|| Error::MalformedHeader(format!("missing field {name}")))
    };
    Ok((
        DatasetShape {
            scenes: get(0, "G")?,
            actions: get(1, "H")?,
            poses: get(2, "Z")?,
            max_persons: get(3, "M")?,
        },
        get(4, "N")?,
    ))
}

fn parse_instance<'a, S: Scalar>(
    lines: &mut impl Iterator<Item = &'a str>,
    shape: DatasetShape,
    index: usize,
) -> Result<SceneInstance<S>> {
    let bad = |msg: String| Error::MalformedRecord { index, msg };
    let mut next = |tag: &str| -> Result<Vec<&'a str>> {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("unexpected end of file, wanted `{tag}` line")))?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some(t) if t == tag => Ok(toks.collect()),
            other => Err(bad(format!("expected `{tag}` line, found `{}`", other.unwrap_or("")))),
        }
    };
    let parse_label = |tok: &str, limit: usize, what: &str| -> Result<Option<usize>> {
        let v: i64 = tok
            .parse()
            .map_err(|_| bad(format!("bad {what} label `{tok}`")))?;
        match v {
            -1 => Ok(None),
            v if v >= 0 && (v as usize) < limit => Ok(Some(v as usize)),
            v => Err(bad(format!("{what} label {v} out of range 0..{limit}"))),
        }
    };
    let parse_floats = |toks: Vec<&str>, n: usize, what: &str| -> Result<Vec<S>> {
        if toks.len() != n {
            return Err(bad(format!("{what} has {} values, expected {n}", toks.len())));
        }
        toks.iter()
            .map(|t| {
                t.parse::<f64>()
                    .map(S::of)
                    .map_err(|_| bad(format!("bad float `{t}` in {what}")))
            })
            .collect()
    };

    let head = next("I")?;
    if head.len() != 1 {
        return Err(bad("`I` line takes one field".into()));
    }
    let truth_scene = parse_label(head[0], shape.scenes, "scene")?;
    let scene = parse_floats(next("S")?, shape.scenes, "scene scores")?;

    let mut inst = SceneInstance {
        unary: Scores::zeros(shape.scenes, shape.actions, shape.poses, shape.max_persons),
        person_mask: vec![false; shape.max_persons],
        truth: Truth {
            scene: truth_scene,
            actions: vec![None; shape.max_persons],
            poses: vec![None; shape.max_persons],
        },
    };
    inst.unary.scene = Array1::from(scene);
    for m in 0..shape.max_persons {
        let p = next("P")?;
        if p.len() != 4 {
            return Err(bad(format!("`P` line for person {m} needs 4 fields")));
        }
        if p[0].parse::<usize>().ok() != Some(m) {
            return Err(bad(format!("expected person index {m}, found `{}`", p[0])));
        }
        inst.person_mask[m] = match p[1] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("mask must be 0 or 1, found `{other}`"))),
        };
        inst.truth.actions[m] = parse_label(p[2], shape.actions, "action")?;
        inst.truth.poses[m] = parse_label(p[3], shape.poses, "pose")?;
        let a = parse_floats(next("A")?, shape.actions, "action scores")?;
        inst.unary.actions.row_mut(m).assign(&Array1::from(a));
        if shape.poses > 0 {
            let r = parse_floats(next("R")?, shape.poses, "pose scores")?;
            inst.unary.poses.row_mut(m).assign(&Array1::from(r));
        }
    }
    Ok(inst)
}
