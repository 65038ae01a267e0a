//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, OpKind, Tensor};

/// Settings for one gradient check. `probes_per_tensor` applies per group
/// with [`GradCheck::run_groups`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Random coordinates probed per input tensor (all of them if the tensor is smaller).
    pub probes_per_tensor: usize,
    pub step: f64,
    /// Times the step is multiplied by 10 when the loss change is lost in
    /// round-off or the difference is unstable.
    pub escalations: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Corrupts the analytic pass only; negative-control fixture.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            probes_per_tensor: 10,
            step: 1e-4,
            escalations: 2,
            tolerance: 1e-5,
            seed: 0x5eed,
            fault: None,
        }
    }
}

/// Worst disagreement seen by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub tensor: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    pub probes: usize,
    /// Probes discarded because no step gave a stable central difference
    /// (a rectifier or L1 kink was crossed).
    pub non_smooth: usize,
    /// Probes discarded because the loss change stayed within round-off at
    /// every step of the ladder.
    pub unresolved: usize,
    pub max_rel_error: f64,
    pub worst: Option<Probe>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel_error < self.tolerance
    }

    /// Combines group reports; the worst group decides.
    pub fn merge(label: &str, tolerance: f64, parts: &[GradCheckReport]) -> Self {
        let mut out = GradCheckReport {
            label: label.to_string(),
            tolerance,
            probes: parts.iter().map(|r| r.probes).sum(),
            non_smooth: parts.iter().map(|r| r.non_smooth).sum(),
            unresolved: parts.iter().map(|r| r.unresolved).sum(),
            max_rel_error: 0.0,
            worst: None,
        };
        for r in parts {
            if r.max_rel_error > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
                out.worst = r.worst.clone().or(out.worst);
            }
        }
        out
    }
}

/// Tensors probed together as one pool of coordinates.
#[derive(Clone, Debug)]
pub struct ProbeGroup {
    pub name: String,
    pub tensors: Vec<usize>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

impl GradCheck {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    /// Checks the gradient of the scalar built by `build` with respect to each
    /// of `inputs`. `build` receives one node per input, in order.
    pub fn run<F>(&self, label: &str, inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    {
        let groups: Vec<ProbeGroup> = (0..inputs.len())
            .map(|t| ProbeGroup {
                name: format!("{label}[{t}]"),
                tensors: vec![t],
            })
            .collect();
        let reports = self.run_groups(inputs, &groups, build)?;
        Ok(GradCheckReport::merge(label, self.tolerance, &reports))
    }

    /// Like [`GradCheck::run`], but probes each group's tensors as one pool of
    /// coordinates and reports per group.
    pub fn run_groups<F>(&self, inputs: &[Tensor<f64>], groups: &[ProbeGroup], build: F) -> Result<Vec<GradCheckReport>>
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    {
        let mut graph = Graph::new();
        if let Some((kind, scale)) = self.fault {
            graph.inject_fault(kind, scale);
        }
        let ids: Vec<NodeId> = inputs.iter().map(|t| graph.param(t.clone())).collect();
        let root = build(&mut graph, &ids)?;
        let mut grads = graph.backward(root)?;
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .map(|&id| grads.take(id).ok_or_else(|| Error::InvalidArgument("missing leaf gradient".into())))
            .collect::<Result<_>>()?;
        drop(graph);

        let evaluate = |perturbed: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
            let root = build(&mut g, &ids)?;
            g.value(root)
                .item()
                .ok_or_else(|| Error::NonScalarRoot(g.shape(root).to_vec()))
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut reports = Vec::with_capacity(groups.len());
        for group in groups {
            let mut report = GradCheckReport {
                label: group.name.clone(),
                tolerance: self.tolerance,
                probes: 0,
                non_smooth: 0,
                unresolved: 0,
                max_rel_error: 0.0,
                worst: None,
            };
            let pool: Vec<(usize, usize)> = group
                .tensors
                .iter()
                .flat_map(|&t| (0..inputs[t].len()).map(move |c| (t, c)))
                .collect();
            // Draw spare coordinates so discarded probes can be replaced.
            let wanted = self.probes_per_tensor.min(pool.len());
            let order = index::sample(&mut rng, pool.len(), (wanted * 3).min(pool.len())).into_vec();
            let mut done = 0;
            for (t, coordinate) in order.into_iter().map(|i| pool[i]) {
                if done == wanted {
                    break;
                }
                let a = analytic[t].data()[coordinate];
                let numeric = match self.estimate(&mut work, t, coordinate, a, &evaluate)? {
                    Estimate::Value(v) => v,
                    Estimate::NonSmooth => {
                        report.non_smooth += 1;
                        continue;
                    }
                    Estimate::Unresolved => {
                        report.unresolved += 1;
                        continue;
                    }
                };
                let err = relative_error(a, numeric);
                done += 1;
                report.probes += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some(Probe {
                        tensor: t,
                        coordinate,
                        analytic: a,
                        numeric,
                        rel_error: err,
                    });
                }
            }
            if done < wanted {
                // Too few smooth coordinates; treat as a failure rather than pass silently.
                report.max_rel_error = f64::INFINITY;
            }
            reports.push(report);
        }
        Ok(reports)
    }

    /// Central difference at the first step of the ladder whose loss change
    /// is well above round-off and which either agrees with `analytic` or is
    /// stable against halving the step.
    fn estimate(
        &self,
        work: &mut [Tensor<f64>],
        tensor: usize,
        coordinate: usize,
        analytic: f64,
        evaluate: &impl Fn(&[Tensor<f64>]) -> Result<f64>,
    ) -> Result<Estimate> {
        let mut step = self.step;
        let mut resolved = false;
        for _ in 0..=self.escalations {
            let (numeric, delta, scale) = self.central(work, tensor, coordinate, step, evaluate)?;
            step *= 10.0;
            if delta == 0.0 && relative_error(analytic, 0.0) < self.tolerance {
                return Ok(Estimate::Value(0.0));
            }
            if delta.abs() < RESOLVE_ULPS * f64::EPSILON * scale {
                continue;
            }
            resolved = true;
            if relative_error(analytic, numeric) < self.tolerance {
                return Ok(Estimate::Value(numeric));
            }
            let (half, _, _) = self.central(work, tensor, coordinate, step / 20.0, evaluate)?;
            if relative_error(numeric, half) < self.tolerance / 10.0 {
                return Ok(Estimate::Value(numeric));
            }
        }
        Ok(if resolved { Estimate::NonSmooth } else { Estimate::Unresolved })
    }

    /// Returns the central difference, the loss change and the loss magnitude.
    fn central(
        &self,
        work: &mut [Tensor<f64>],
        tensor: usize,
        coordinate: usize,
        step: f64,
        evaluate: &impl Fn(&[Tensor<f64>]) -> Result<f64>,
    ) -> Result<(f64, f64, f64)> {
        let original = work[tensor].data()[coordinate];
        work[tensor].data_mut()[coordinate] = original + step;
        let plus = evaluate(work);
        work[tensor].data_mut()[coordinate] = original - step;
        let minus = evaluate(work);
        work[tensor].data_mut()[coordinate] = original;
        let (plus, minus) = (plus?, minus?);
        Ok(((plus - minus) / (2.0 * step), plus - minus, plus.abs().max(minus.abs())))
    }
}

/// Minimum loss change, in units of its round-off, for a usable difference.
const RESOLVE_ULPS: f64 = 1e6;

enum Estimate {
    Value(f64),
    NonSmooth,
    Unresolved,
}
