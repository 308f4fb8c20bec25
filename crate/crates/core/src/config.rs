//! Label spaces, hyperparameters and the `key=value` config file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Cardinalities of the scene, action and pose label sets.
///
/// `num_poses == 0` selects the arity-2 variant: the pose chain and the
/// poses-all layer are removed and factors span (scene, action) only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelSpaces {
    pub num_scenes: usize,
    pub num_actions: usize,
    pub num_poses: usize,
}

impl LabelSpaces {
    pub fn has_poses(&self) -> bool {
        self.num_poses > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Linear,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Config(format!(
                "activation must be `tanh` or `linear`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub label_spaces: LabelSpaces,
    /// Person slots per frame (M_max); shorter frames are padded.
    pub max_persons: usize,
    /// Latent poses-all factors per scene label (T).
    pub latent_factors_per_scene: usize,
    /// Message-passing steps (K).
    pub num_steps: usize,
    pub factor_activation: Activation,
    pub tie_psi_positions: bool,
    pub learning_rate: f64,
    /// Epochs of the scene-only phase and the persons-only phase.
    pub phase_epochs: (usize, usize),
    pub rng_seed: u64,
}

impl ModelConfig {
    /// A config with the default structure (T = 10, K = 2, tanh factors).
    pub fn new(num_scenes: usize, num_actions: usize, num_poses: usize, max_persons: usize) -> Self {
        ModelConfig {
            label_spaces: LabelSpaces {
                num_scenes,
                num_actions,
                num_poses,
            },
            max_persons,
            latent_factors_per_scene: if num_poses > 0 { 10 } else { 0 },
            num_steps: 2,
            factor_activation: Activation::Tanh,
            tie_psi_positions: false,
            learning_rate: 0.05,
            phase_epochs: (10, 10),
            rng_seed: 0,
        }
    }

    pub fn with_latent(mut self, t: usize) -> Self {
        self.latent_factors_per_scene = t;
        self
    }

    pub fn with_steps(mut self, k: usize) -> Self {
        self.num_steps = k;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.factor_activation = activation;
        self
    }

    pub fn with_tied_psi(mut self, tied: bool) -> Self {
        self.tie_psi_positions = tied;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn dims(&self) -> Dims {
        Dims::from_config(self)
    }

    /// FNV-1a hash of the dimensions that fix tensor shapes in data files
    /// (|G|, |H|, |Z|, M_max).
    pub fn fingerprint(&self) -> u64 {
        let ls = &self.label_spaces;
        fingerprint_of(ls.num_scenes, ls.num_actions, ls.num_poses, self.max_persons)
    }

    pub fn to_config_string(&self) -> String {
        let ls = &self.label_spaces;
        let mut out = String::new();
        let _ = writeln!(out, "num_scenes={}", ls.num_scenes);
        let _ = writeln!(out, "num_actions={}", ls.num_actions);
        let _ = writeln!(out, "num_poses={}", ls.num_poses);
        let _ = writeln!(out, "max_persons={}", self.max_persons);
        let _ = writeln!(out, "latent_T={}", self.latent_factors_per_scene);
        let _ = writeln!(out, "num_steps={}", self.num_steps);
        let _ = writeln!(out, "activation={}", self.factor_activation.as_str());
        let _ = writeln!(out, "tie_psi_positions={}", self.tie_psi_positions);
        let _ = writeln!(out, "learning_rate={}", self.learning_rate);
        let _ = writeln!(out, "epochs_phase_a={}", self.phase_epochs.0);
        let _ = writeln!(out, "epochs_phase_b={}", self.phase_epochs.1);
        let _ = writeln!(out, "seed={}", self.rng_seed);
        out
    }

    /// Parses the flat `key=value` format. Label cardinalities and
    /// `max_persons` are required; every other key falls back to the
    /// defaults of [`ModelConfig::new`]. The result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut scenes = None;
        let mut actions = None;
        let mut poses = None;
        let mut persons = None;
        let mut rest: Vec<(usize, String, String)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: line_no,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "num_scenes" => scenes = Some(parse_value(line_no, key, value)?),
                "num_actions" => actions = Some(parse_value(line_no, key, value)?),
                "num_poses" => poses = Some(parse_value(line_no, key, value)?),
                "max_persons" => persons = Some(parse_value(line_no, key, value)?),
                "latent_T" | "num_steps" | "activation" | "tie_psi_positions" | "learning_rate"
                | "epochs_phase_a" | "epochs_phase_b" | "seed" => {
                    rest.push((line_no, key.to_string(), value.to_string()))
                }
                other => {
                    return Err(Error::ConfigParse {
                        line: line_no,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }

        let need = |v: Option<usize>, key: &str| {
            v.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
        };
        let mut cfg = ModelConfig::new(
            need(scenes, "num_scenes")?,
            need(actions, "num_actions")?,
            need(poses, "num_poses")?,
            need(persons, "max_persons")?,
        );
        for (line, key, value) in rest {
            match key.as_str() {
                "latent_T" => cfg.latent_factors_per_scene = parse_value(line, &key, &value)?,
                "num_steps" => cfg.num_steps = parse_value(line, &key, &value)?,
                "activation" => cfg.factor_activation = parse_value(line, &key, &value)?,
                "tie_psi_positions" => cfg.tie_psi_positions = parse_value(line, &key, &value)?,
                "learning_rate" => cfg.learning_rate = parse_value(line, &key, &value)?,
                "epochs_phase_a" => cfg.phase_epochs.0 = parse_value(line, &key, &value)?,
                "epochs_phase_b" => cfg.phase_epochs.1 = parse_value(line, &key, &value)?,
                "seed" => cfg.rng_seed = parse_value(line, &key, &value)?,
                _ => unreachable!("filtered above"),
            }
        }
        validate_config(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub(crate) fn fingerprint_of(g: usize, h: usize, z: usize, m: usize) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for v in [g, h, z, m] {
        for b in (v as u64).to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(PRIME);
        }
    }
    hash
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigParse {
        line,
        msg: format!("bad value `{value}` for `{key}`"),
    })
}

/// Returns `cfg` unchanged iff every invariant holds; otherwise names the
/// first violated one.
pub fn validate_config(cfg: ModelConfig) -> Result<ModelConfig> {
    let ls = &cfg.label_spaces;
    let fail = |msg: &str| Err(Error::Config(msg.to_string()));
    if ls.num_scenes < 2 {
        return fail("num_scenes ≥ 2");
    }
    if ls.num_actions < 1 {
        return fail("num_actions ≥ 1");
    }
    if cfg.max_persons < 1 {
        return fail("max_persons ≥ 1");
    }
    if cfg.num_steps < 1 {
        return fail("num_steps ≥ 1");
    }
    if ls.has_poses() && cfg.latent_factors_per_scene < 1 {
        return fail("latent_T ≥ 1 when num_poses > 0");
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return fail("learning_rate > 0");
    }
    Ok(cfg)
}

/// Tensor extents derived from a validated config.
///
/// The arity-2 variant is stored with a singleton pose axis (`zs == 1`) and
/// two-wide templates so both variants share one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub scenes: usize,
    pub actions: usize,
    pub poses: usize,
    /// Pose extent of φ tensors: `max(poses, 1)`.
    pub zs: usize,
    pub persons: usize,
    /// Latent ψ factors per scene; 0 in arity-2 mode.
    pub latent: usize,
    /// Template width of φ: 3 with poses, 2 without.
    pub width: usize,
    pub tied_psi: bool,
}

impl Dims {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let ls = cfg.label_spaces;
        let poses = ls.has_poses();
        Dims {
            scenes: ls.num_scenes,
            actions: ls.num_actions,
            poses: ls.num_poses,
            zs: ls.num_poses.max(1),
            persons: cfg.max_persons,
            latent: if poses { cfg.latent_factors_per_scene } else { 0 },
            width: if poses { 3 } else { 2 },
            tied_psi: cfg.tie_psi_positions,
        }
    }

    pub fn has_poses(&self) -> bool {
        self.poses > 0
    }

    /// Length of a β template: the scene score plus either one pose block
    /// per person slot or a single shared block.
    pub fn psi_width(&self) -> usize {
        if self.tied_psi {
            1 + self.poses
        } else {
            1 + self.persons * self.poses
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collective_activity_scale_is_valid() {
        let cfg = ModelConfig::new(5, 5, 8, 12).with_latent(10).with_steps(2);
        assert_eq!(validate_config(cfg.clone()).unwrap(), cfg);
    }

    #[test]
    fn arity_two_is_valid_without_latent() {
        let mut cfg = ModelConfig::new(2, 6, 0, 8);
        cfg.latent_factors_per_scene = 0;
        let cfg = validate_config(cfg).unwrap();
        assert_eq!(cfg.dims().latent, 0);
        assert_eq!(cfg.dims().width, 2);
    }

    #[test]
    fn single_scene_is_rejected() {
        let err = validate_config(ModelConfig::new(1, 3, 2, 2)).unwrap_err();
        assert!(err.to_string().contains("num_scenes ≥ 2"), "{err}");
    }

    #[test]
    fn missing_latent_with_poses_is_rejected() {
        let err = validate_config(ModelConfig::new(2, 3, 2, 2).with_latent(0)).unwrap_err();
        assert!(err.to_string().contains("latent_T"), "{err}");
    }

    #[test]
    fn config_text_round_trips() {
        let cfg = ModelConfig::new(3, 4, 2, 5)
            .with_latent(3)
            .with_steps(3)
            .with_activation(Activation::Linear)
            .with_tied_psi(true)
            .with_seed(99);
        let parsed = ModelConfig::parse(&cfg.to_config_string()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn parse_handles_comments_and_defaults() {
        let text = "# tiny\nnum_scenes = 2\nnum_actions=2 # inline\nnum_poses=0\nmax_persons=3\n\n";
        let cfg = ModelConfig::parse(text).unwrap();
        assert_eq!(cfg.label_spaces.num_poses, 0);
        assert_eq!(cfg.num_steps, 2);
    }

    #[test]
    fn parse_rejects_unknown_keys() {
        let err = ModelConfig::parse("num_scenes=2\nbogus=1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 2, .. }), "{err}");
    }

    #[test]
    fn fingerprint_depends_on_shape_only() {
        let a = ModelConfig::new(3, 4, 2, 5);
        let b = a.clone().with_seed(7).with_steps(5);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), ModelConfig::new(3, 4, 2, 6).fingerprint());
    }
}
