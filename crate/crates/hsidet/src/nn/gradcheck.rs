//! Central-difference gradient verification for parameterized blocks.
//!
//! The forward builder is re-run from scratch for every probe, so batch-norm
//! statistics and pooling argmaxes are recomputed consistently with the
//! perturbed parameters. 64-bit only: finite differences are unreliable in
//! 32-bit precision.

use rand::Rng;

use super::{bind, Forward, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of parameter coordinates to probe.
    pub coords: usize,
    pub seed: u64,
    /// Run batch norm on batch statistics, as training does.
    pub train: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            coords: 120,
            seed: 0x5eed,
            train: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Verify analytic gradients of a scalar-valued forward builder against
/// central differences over randomly sampled parameter coordinates.
///
/// Relative error is measured as |g - g_fd| / max(1, |g_fd|).
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    cfg: &GradCheckConfig,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Forward<'_, f64>) -> Result<Var>,
{
    fn run<F>(
        store: &ParamStore<f64>,
        train: bool,
        build: &mut F,
    ) -> Result<(Graph<f64>, super::BoundParams, Var)>
    where
        F: FnMut(&mut Forward<'_, f64>) -> Result<Var>,
    {
        let mut graph = Graph::new();
        let bound = bind(store, &mut graph);
        let mut cx = Forward::new(&mut graph, &bound, store, train);
        let loss = build(&mut cx)?;
        if graph.shape(loss).numel() != 1 {
            return Err(Error::shape(
                "gradcheck",
                format!("builder must produce a scalar, got {}", graph.shape(loss)),
            ));
        }
        Ok((graph, bound, loss))
    }

    let (graph, bound, loss) = run(store, cfg.train, &mut build)?;
    let grads = graph.backward(loss)?;

    // Analytic gradient per learnable, keyed by store entry index.
    let learnables: Vec<(usize, String, usize)> = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == ParamKind::Learnable)
        .map(|(i, e)| (i, e.name.clone(), e.tensor.shape().numel()))
        .collect();
    let total: usize = learnables.iter().map(|(_, _, n)| n).sum();
    if total == 0 {
        return Err(Error::Param("no learnable parameters to check".into()));
    }

    let mut rng = super::test_rng(cfg.seed);
    let n_probe = cfg.coords.min(total);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < n_probe {
        picked.insert(rng.gen_range(0..total));
    }

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for flat in picked {
        // Locate (entry, offset) for the flat coordinate.
        let mut rem = flat;
        let (entry_idx, name) = {
            let mut found = None;
            for (i, name, n) in &learnables {
                if rem < *n {
                    found = Some((*i, name.clone()));
                    break;
                }
                rem -= n;
            }
            found.expect("flat index within total")
        };

        let original = store.entries()[entry_idx].tensor.data()[rem];
        let mut probe = |value: f64, store: &mut ParamStore<f64>| -> Result<f64> {
            let mut t = store.entries()[entry_idx].tensor.clone();
            t.data_mut()[rem] = value;
            let entry_name = store.entries()[entry_idx].name.clone();
            store.set_tensor(&entry_name, t)?;
            let (graph, _, loss) = run(store, cfg.train, &mut build)?;
            Ok(graph.value(loss).item())
        };
        let lp = probe(original + cfg.step, store)?;
        let lm = probe(original - cfg.step, store)?;
        probe(original, store)?;

        let fd = (lp - lm) / (2.0 * cfg.step);
        let analytic = grads
            .get(bound.var(&name)?)
            .map(|g| g.data()[rem])
            .unwrap_or(0.0);
        let rel = (analytic - fd).abs() / fd.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{name}[{rem}] analytic {analytic:.9e} fd {fd:.9e}");
        }
    }

    Ok(GradCheckReport {
        coords_checked: n_probe,
        max_rel_err: max_rel,
        worst,
    })
}
