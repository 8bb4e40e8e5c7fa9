//! Central-difference validation of the backward pass.
//!
//! The caller supplies a closure that rebuilds the same scalar loss from any
//! parameter store; the checker perturbs each parameter element in turn and
//! compares (f(p+e) - f(p-e)) / 2e against the analytic gradient.

use super::graph::{Graph, NodeId};
use super::store::{ParamKey, ParameterStore};
use super::EngineError;

/// Relative error denominators are floored here so that elements whose true
/// gradient is exactly zero do not fail on finite-difference rounding noise.
const DENOM_FLOOR: f64 = 1e-6;

/// Largest fragment the checker will sweep; central differences need two
/// full forward passes per element, so anything bigger is a test bug.
const MAX_FRAGMENT: usize = 5000;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Elements checked per tensor; larger tensors are sampled evenly.
    pub samples_per_tensor: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: usize::MAX,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub key: ParamKey,
    pub checked: usize,
    pub max_rel_err: f64,
    /// (element index, analytic, finite difference) of the worst element.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    /// One line per parameter block, worst element first.
    pub fn summary(&self) -> String {
        let mut lines: Vec<String> = self
            .blocks
            .iter()
            .map(|b| {
                format!(
                    "{}[{}]: checked {} elems, max rel err {:.3e}",
                    b.key.partition, b.key.index, b.checked, b.max_rel_err
                )
            })
            .collect();
        lines.push(format!(
            "overall max rel err {:.3e} (tolerance {:.1e})",
            self.max_rel_err(),
            self.tolerance
        ));
        lines.join("\n")
    }
}

pub fn check_gradients<F, E>(
    store: &ParameterStore,
    settings: &GradCheckSettings,
    build: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&ParameterStore) -> Result<(Graph, NodeId), E>,
    E: From<EngineError>,
{
    let (graph, loss) = build(store)?;
    let analytic = graph.backward(loss).map_err(E::from)?;

    let fragment: usize = analytic.params().values().map(|g| g.numel()).sum();
    if fragment > MAX_FRAGMENT {
        return Err(E::from(EngineError::BadArgument {
            op: "check_gradients",
            msg: format!("fragment has {fragment} parameters, limit {MAX_FRAGMENT}"),
        }));
    }

    let mut work = store.clone();
    let mut blocks = Vec::new();
    for (key, agrad) in analytic.params() {
        let n = agrad.numel();
        let indices: Vec<usize> = if n <= settings.samples_per_tensor {
            (0..n).collect()
        } else {
            (0..settings.samples_per_tensor)
                .map(|i| i * n / settings.samples_per_tensor)
                .collect()
        };
        let mut max_rel = 0.0;
        let mut worst = None;
        for &e in &indices {
            let orig = work.tensor(&key.partition, key.index).map_err(E::from)?.data()[e];

            work.tensor_mut(&key.partition, key.index).map_err(E::from)?.data_mut()[e] =
                orig + settings.epsilon;
            let (gp, lp) = build(&work)?;
            let plus = gp.value(lp).item();

            work.tensor_mut(&key.partition, key.index).map_err(E::from)?.data_mut()[e] =
                orig - settings.epsilon;
            let (gm, lm) = build(&work)?;
            let minus = gm.value(lm).item();

            work.tensor_mut(&key.partition, key.index).map_err(E::from)?.data_mut()[e] = orig;

            let fd = (plus - minus) / (2.0 * settings.epsilon);
            let a = agrad.data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(DENOM_FLOOR);
            if rel > max_rel {
                max_rel = rel;
                worst = Some((e, a, fd));
            }
        }
        blocks.push(BlockReport {
            key: key.clone(),
            checked: indices.len(),
            max_rel_err: max_rel,
            worst,
        });
    }

    Ok(GradCheckReport {
        tolerance: settings.tolerance,
        blocks,
    })
}
