//! Versioned JSON files for models and data sets, and the model validator.
//!
//! Matrices are stored row-major with explicit dimensions. Floats are written
//! in shortest round-trip form so a load of a save is bit-exact.

use std::path::Path;

use nalgebra::{DMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{euler_step, ActuatorParams, PlantState, StateVector, STATE_DIM};
use crate::config::{parse_error, RunConfig};
use crate::error::{Error, Result};
use crate::fit::{check_cck_structure, BilinearLiftedModel, DataSet, LinearLiftedModel, Transition, Variant, PHI, THETA};
use crate::lifting::Dictionary;
use crate::mpc::AnyModel;

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Names of the plant-state coordinates in lifted order.
pub const STATE_ORDER: [&str; STATE_DIM] = ["phi_1", "phi_2", "phi_dot_1", "phi_dot_2", "theta_1", "theta_2", "theta_dot_1", "theta_dot_2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        MatrixData {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self, context: &'static str) -> Result<DMatrix<f64>> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.rows * self.cols,
                got: self.data.len(),
            });
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryData {
    pub state_order: Vec<String>,
    pub offset: Vec<f64>,
    pub weight: Vec<f64>,
    /// One row per RBF center, columns in `state_order`.
    pub centers: MatrixData,
    pub widths: Vec<f64>,
    pub seed: u64,
}

impl DictionaryData {
    pub fn from_dictionary(d: &Dictionary) -> Self {
        let mut data = Vec::with_capacity(d.num_rbf() * STATE_DIM);
        for c in &d.centers {
            data.extend(c.iter());
        }
        DictionaryData {
            state_order: STATE_ORDER.iter().map(|s| s.to_string()).collect(),
            offset: d.offset.to_vec(),
            weight: d.weight.to_vec(),
            centers: MatrixData {
                rows: d.num_rbf(),
                cols: STATE_DIM,
                data,
            },
            widths: d.widths.clone(),
            seed: d.seed,
        }
    }

    pub fn to_dictionary(&self) -> Result<Dictionary> {
        if self.state_order.iter().map(String::as_str).ne(STATE_ORDER.iter().copied()) {
            return Err(Error::InvalidModel(format!("unexpected state ordering {:?}", self.state_order)));
        }
        let fixed = |v: &[f64], ctx: &'static str| -> Result<[f64; STATE_DIM]> {
            v.try_into().map_err(|_| Error::DimensionMismatch {
                context: ctx,
                expected: STATE_DIM,
                got: v.len(),
            })
        };
        if self.centers.cols != STATE_DIM {
            return Err(Error::DimensionMismatch {
                context: "dictionary centers",
                expected: STATE_DIM,
                got: self.centers.cols,
            });
        }
        let m = self.centers.to_matrix("dictionary centers")?;
        let d = Dictionary {
            offset: fixed(&self.offset, "dictionary offset")?,
            weight: fixed(&self.weight, "dictionary weight")?,
            centers: (0..m.nrows()).map(|r| StateVector::from_iterator(m.row(r).iter().cloned())).collect(),
            widths: self.widths.clone(),
            seed: self.seed,
        };
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Self {
        Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub variant: Variant,
    /// Lifted dimension.
    pub d: usize,
    /// Number of inputs.
    pub n: usize,
    pub dt: f64,
    pub a: MatrixData,
    pub b: MatrixData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bilinear: Option<Vec<MatrixData>>,
    pub dictionary: DictionaryData,
    pub dictionary_hash: String,
    pub actuator: ActuatorParams,
    pub provenance: Provenance,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn probe_version(text: &str, expected: u32) -> Result<()> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    if probe.format_version != expected {
        return Err(Error::UnsupportedVersion {
            found: probe.format_version,
            expected,
        });
    }
    Ok(())
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidModel(format!("{what} contains non-finite values")));
    }
    Ok(())
}

impl ModelFile {
    pub fn from_model(model: &AnyModel, actuator: &ActuatorParams, provenance: Provenance) -> Self {
        let bilinear = match model {
            AnyModel::Bilinear(m) => Some(m.n.iter().map(MatrixData::from_matrix).collect()),
            AnyModel::Linear(_) => None,
        };
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            variant: model.variant(),
            d: model.a().nrows(),
            n: model.b().ncols(),
            dt: model.dt(),
            a: MatrixData::from_matrix(model.a()),
            b: MatrixData::from_matrix(model.b()),
            bilinear,
            dictionary: DictionaryData::from_dictionary(model.dictionary()),
            dictionary_hash: model.dictionary().digest(),
            actuator: *actuator,
            provenance,
        }
    }

    /// Rebuilds the model after checking every dimension field.
    pub fn to_model(&self) -> Result<AnyModel> {
        let dict = self.dictionary.to_dictionary()?;
        if dict.dim() != self.d {
            return Err(Error::DimensionMismatch {
                context: "dictionary dimension",
                expected: self.d,
                got: dict.dim(),
            });
        }
        if dict.digest() != self.dictionary_hash {
            return Err(Error::InvalidModel("dictionary hash does not match its payload".into()));
        }
        let a = self.a.to_matrix("A")?;
        let b = self.b.to_matrix("B")?;
        if a.shape() != (self.d, self.d) {
            return Err(Error::DimensionMismatch {
                context: "A shape",
                expected: self.d,
                got: if a.nrows() != self.d { a.nrows() } else { a.ncols() },
            });
        }
        if b.shape() != (self.d, self.n) {
            return Err(Error::DimensionMismatch {
                context: "B shape",
                expected: self.n,
                got: b.ncols(),
            });
        }
        match (self.variant, &self.bilinear) {
            (Variant::Bilinear, Some(blocks)) => {
                if blocks.len() != self.n {
                    return Err(Error::DimensionMismatch {
                        context: "bilinear block count",
                        expected: self.n,
                        got: blocks.len(),
                    });
                }
                let n = blocks
                    .iter()
                    .map(|m| {
                        let m = m.to_matrix("bilinear block")?;
                        if m.shape() != (self.d, self.d) {
                            return Err(Error::DimensionMismatch {
                                context: "bilinear block shape",
                                expected: self.d,
                                got: m.nrows(),
                            });
                        }
                        Ok(m)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(AnyModel::Bilinear(BilinearLiftedModel {
                    a,
                    b,
                    n,
                    dictionary: dict,
                    dt: self.dt,
                }))
            }
            (Variant::Bilinear, None) => Err(Error::InvalidModel("bilinear model without bilinear blocks".into())),
            (_, Some(_)) => Err(Error::InvalidModel(format!("{} model carries bilinear blocks", self.variant))),
            (variant, None) => Ok(AnyModel::Linear(LinearLiftedModel {
                a,
                b,
                dictionary: dict,
                variant,
                dt: self.dt,
            })),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        ensure_finite(&self.a.data, "A")?;
        ensure_finite(&self.b.data, "B")?;
        for m in self.bilinear.iter().flatten() {
            ensure_finite(&m.data, "bilinear block")?;
        }
        serde_json::to_string(self).map_err(|e| Error::InvalidModel(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        probe_version(text, MODEL_FORMAT_VERSION)?;
        serde_json::from_str(text).map_err(|e| parse_error(text, &e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeData {
    /// `steps + 1` states, row-major in `STATE_ORDER`.
    pub states: Vec<f64>,
    /// `steps` inputs.
    pub inputs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub format_version: u32,
    pub dt: f64,
    pub seed: u64,
    pub provenance: Provenance,
    /// The fully resolved config the data was generated with.
    pub config: RunConfig,
    pub episodes: Vec<EpisodeData>,
}

impl DatasetFile {
    /// Episodes must be contiguous trajectories (each successor is the next state).
    pub fn from_dataset(data: &DataSet, cfg: &RunConfig) -> Result<Self> {
        data.validate()?;
        let mut episodes = Vec::with_capacity(data.episodes.len());
        for ep in &data.episodes {
            let samples = &data.samples[ep.clone()];
            let mut states = Vec::with_capacity((samples.len() + 1) * STATE_DIM);
            let mut inputs = Vec::with_capacity(samples.len() * 2);
            for (i, t) in samples.iter().enumerate() {
                if i > 0 && samples[i - 1].next != t.x {
                    return Err(Error::InvalidModel("episode is not a contiguous trajectory".into()));
                }
                states.extend(t.x.to_vector().iter());
                inputs.extend(t.u.iter());
            }
            if let Some(last) = samples.last() {
                states.extend(last.next.to_vector().iter());
            }
            episodes.push(EpisodeData { states, inputs });
        }
        Ok(DatasetFile {
            format_version: DATASET_FORMAT_VERSION,
            dt: data.dt,
            seed: data.seed,
            provenance: Provenance::of(cfg),
            config: cfg.clone(),
            episodes,
        })
    }

    pub fn to_dataset(&self) -> Result<DataSet> {
        let mut samples = Vec::new();
        let mut episodes = Vec::with_capacity(self.episodes.len());
        for ep in &self.episodes {
            let steps = ep.inputs.len() / 2;
            if ep.inputs.len() % 2 != 0 || ep.states.len() != (steps + usize::from(steps > 0)) * STATE_DIM {
                return Err(Error::DimensionMismatch {
                    context: "dataset episode",
                    expected: (steps + 1) * STATE_DIM,
                    got: ep.states.len(),
                });
            }
            let start = samples.len();
            for t in 0..steps {
                let x = PlantState::from_slice(&ep.states[t * STATE_DIM..(t + 1) * STATE_DIM])?;
                let next = PlantState::from_slice(&ep.states[(t + 1) * STATE_DIM..(t + 2) * STATE_DIM])?;
                let u = Vector2::new(ep.inputs[2 * t], ep.inputs[2 * t + 1]);
                samples.push(Transition { x, u, next });
            }
            episodes.push(start..samples.len());
        }
        Ok(DataSet {
            samples,
            episodes,
            seed: self.seed,
            dt: self.dt,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        for ep in &self.episodes {
            ensure_finite(&ep.states, "dataset states")?;
        }
        serde_json::to_string(self).map_err(|e| Error::InvalidModel(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        probe_version(text, DATASET_FORMAT_VERSION)?;
        serde_json::from_str(text).map_err(|e| parse_error(text, &e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// `None` when the check does not apply to this variant.
    pub passed: Option<bool>,
    pub residual: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<CheckOutcome>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed != Some(false))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let status = match c.passed {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "SKIP",
            };
            s.push_str(&format!("{status} {:<16} residual={:.3e} {}\n", c.name, c.residual, c.detail));
        }
        s
    }
}

/// Largest relative mismatch between the model's actuator rows applied to
/// lifted random states and the plant's zero-input actuator update.
fn actuator_row_error(model: &LinearLiftedModel, act: &ActuatorParams) -> f64 {
    let params = crate::arm::PlantParams {
        arm: Default::default(),
        actuator: *act,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst: f64 = 0.0;
    for _ in 0..64 {
        let v = StateVector::from_fn(|_, _| rng.gen_range(-3.0..3.0));
        let x = PlantState::from_vector(&v);
        let z = model.dictionary.lift(&x);
        let pred = &model.a * z;
        let truth = euler_step(&x, &Vector2::zeros(), &params).to_vector();
        for i in PHI..THETA {
            let rel = (pred[i] - truth[i]).abs() / truth[i].abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Runs the structural invariant suite on a loaded model file.
pub fn validate_model_file(file: &ModelFile) -> ValidationReport {
    let mut checks = Vec::new();
    let model = match file.to_model() {
        Ok(m) => {
            checks.push(CheckOutcome {
                name: "dimensions",
                passed: Some(true),
                residual: 0.0,
                detail: format!("d={} n={}", file.d, file.n),
            });
            m
        }
        Err(e) => {
            checks.push(CheckOutcome {
                name: "dimensions",
                passed: Some(false),
                residual: f64::INFINITY,
                detail: e.to_string(),
            });
            return ValidationReport { checks };
        }
    };

    let finite = model.a().iter().chain(model.b().iter()).all(|v| v.is_finite());
    checks.push(CheckOutcome {
        name: "finite",
        passed: Some(finite),
        residual: 0.0,
        detail: String::new(),
    });

    let coherent = matches!(file.variant, Variant::Cck | Variant::Hybrid);
    let s = check_cck_structure(model.b(), &file.actuator);
    let worst_off = s.off_support.iter().map(|e| e.2.abs()).fold(0.0, f64::max);
    checks.push(CheckOutcome {
        name: "b_structure",
        passed: coherent.then(|| s.passed()),
        residual: worst_off.max(s.diagonal_error),
        detail: match s.off_support.first() {
            Some((i, j, v)) => format!("{} entries off the rotor-velocity rows, first B[{i},{j}]={v:e}", s.off_support.len()),
            None => String::new(),
        },
    });

    match &model {
        AnyModel::Linear(m) if m.variant == Variant::Cck => {
            let err = actuator_row_error(m, &file.actuator);
            checks.push(CheckOutcome {
                name: "actuator_rows",
                passed: Some(err <= 1e-12),
                residual: err,
                detail: String::new(),
            });
        }
        _ => checks.push(CheckOutcome {
            name: "actuator_rows",
            passed: None,
            residual: 0.0,
            detail: format!("not applicable to {}", file.variant),
        }),
    }

    let round_trip = file.to_json().and_then(|t| ModelFile::from_json(&t));
    let same = matches!(&round_trip, Ok(f) if f == file && bits_equal(f, file));
    checks.push(CheckOutcome {
        name: "round_trip",
        passed: Some(same),
        residual: if same { 0.0 } else { 1.0 },
        detail: match round_trip {
            Err(e) => e.to_string(),
            Ok(_) => String::new(),
        },
    });
    ValidationReport { checks }
}

fn bits_equal(a: &ModelFile, b: &ModelFile) -> bool {
    let bits = |m: &MatrixData| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    bits(&a.a) == bits(&b.a) && bits(&a.b) == bits(&b.b) && a.dt.to_bits() == b.dt.to_bits()
}
