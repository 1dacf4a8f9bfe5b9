//! Analytic-vs-numeric gradient checks, including randomly generated graphs.

use rand::Rng;

use crate::autodiff::{finite_diff_grad, Graph, Var};
use crate::error::Result;
use crate::seed;
use crate::tensor::Tensor;

/// Comparison passes when `|a − n| ≤ abs_floor` or `|a − n| / max(|a|, |n|) ≤ rel_tol`.
/// Relative errors are reported for every entry with `max(|a|, |n|) > abs_floor`.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub h: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            rel_tol: 1e-4,
            abs_floor: 1e-7,
            h: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradReport {
    /// Largest relative error among entries of non-negligible magnitude.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
    pub failures: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn merge(&mut self, other: GradReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.entries += other.entries;
        self.failures += other.failures;
    }
}

/// Checks `d build / d leaves[i]` for every leaf flagged in `wrt`.
pub fn check_gradients<F>(leaves: &[Tensor], wrt: &[bool], build: F, tol: Tolerance) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves
        .iter()
        .zip(wrt)
        .map(|(t, &w)| g.leaf(t.clone(), w))
        .collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradReport::default();
    for (i, leaf) in leaves.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let analytic = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut g, &vars)?;
                Ok(g.scalar(out))
            },
            leaf,
            tol.h,
        )?;
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let abs = (a - n).abs();
            report.entries += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            let scale = a.abs().max(n.abs());
            if scale <= tol.abs_floor {
                continue;
            }
            let rel = abs / scale;
            report.max_rel_err = report.max_rel_err.max(rel);
            if abs > tol.abs_floor && rel > tol.rel_tol {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug)]
enum Step {
    MatMul(usize),
    AddBias(usize),
    MulConst(Tensor),
    Relu,
    Softmax,
    LogSoftmax,
    LogOfSoftmax,
    Scale(f64),
    Neg,
    Clamp(f64, f64),
    SubSelf,
}

/// A randomly generated differentiable program over a few leaves.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub leaves: Vec<Tensor>,
    pub wrt: Vec<bool>,
    conv: Option<(usize, usize)>,
    steps: Vec<Step>,
    readout: Tensor,
    mean: bool,
}

const KINK_MARGIN: f64 = 1e-3;

impl RandomGraph {
    /// Draws a graph from `seed`. Steps that would land an input within a
    /// small margin of a relu or clamp kink are dropped, so central
    /// differences stay valid.
    pub fn generate(seed_value: u64) -> Result<Self> {
        let mut rng = seed::rng(seed_value, &[seed::DATA]);
        let mut leaves = Vec::new();
        let mut wrt = Vec::new();
        let normal = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };

        let rows = rng.gen_range(1..=3);
        let (conv, mut cols) = if rng.gen_bool(0.25) {
            let (h, k, co) = (rng.gen_range(3..=4), 2, rng.gen_range(1..=2));
            leaves.push(normal(&mut rng, &[rows, 1, h, h])?);
            leaves.push(normal(&mut rng, &[co, 1, k, k])?);
            wrt.extend([true, true]);
            (Some((0, 1)), co * (h - k + 1) * (h - k + 1))
        } else {
            let c = rng.gen_range(1..=4);
            leaves.push(normal(&mut rng, &[rows, c])?);
            wrt.push(true);
            (None, c)
        };

        let mut graph = RandomGraph {
            leaves,
            wrt,
            conv,
            steps: Vec::new(),
            readout: Tensor::zeros(&[1]),
            mean: false,
        };
        let depth = rng.gen_range(1..=5);
        for _ in 0..depth {
            let pick = rng.gen_range(0..11);
            let step = match pick {
                0 | 1 => {
                    let out = rng.gen_range(1..=4);
                    graph.leaves.push(normal(&mut rng, &[cols, out])?);
                    graph.wrt.push(rng.gen_bool(0.8));
                    cols = out;
                    Step::MatMul(graph.leaves.len() - 1)
                }
                2 => {
                    graph.leaves.push(normal(&mut rng, &[cols])?);
                    graph.wrt.push(true);
                    Step::AddBias(graph.leaves.len() - 1)
                }
                3 => Step::MulConst(normal(&mut rng, &[rows, cols])?),
                4 => Step::Relu,
                5 => Step::Softmax,
                6 => Step::LogSoftmax,
                7 => Step::LogOfSoftmax,
                8 => Step::Scale(rng.gen_range(-2.0..2.0)),
                9 if rng.gen_bool(0.5) => Step::Neg,
                9 => Step::SubSelf,
                _ => {
                    let a = rng.gen_range(-1.0..0.0);
                    Step::Clamp(a, a + rng.gen_range(0.5..2.0))
                }
            };
            graph.steps.push(step);
            if !graph.kinks_clear()? {
                graph.steps.pop();
            }
        }
        graph.readout = normal(&mut rng, &[rows, cols])?;
        graph.mean = rng.gen_bool(0.5);
        Ok(graph)
    }

    fn kinks_clear(&self) -> Result<bool> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.leaves.iter().map(|t| g.constant(t.clone())).collect();
        let (pre, last) = self.body(&mut g, &vars, self.steps.len() - 1)?;
        let v = g.value(pre).data();
        Ok(match last {
            Step::Relu => v.iter().all(|x| x.abs() > KINK_MARGIN),
            Step::Clamp(lo, hi) => v.iter().all(|x| (x - lo).abs() > KINK_MARGIN && (x - hi).abs() > KINK_MARGIN),
            _ => true,
        })
    }

    fn input(&self, g: &mut Graph, vars: &[Var]) -> Result<Var> {
        match self.conv {
            Some((x, k)) => {
                let c = g.conv2d(vars[x], vars[k])?;
                let shape = g.value(c).shape().to_vec();
                g.reshape(c, vec![shape[0], shape[1..].iter().product()])
            }
            None => Ok(vars[0]),
        }
    }

    fn body<'s>(&'s self, g: &mut Graph, vars: &[Var], upto: usize) -> Result<(Var, &'s Step)> {
        let mut cur = self.input(g, vars)?;
        for step in &self.steps[..upto] {
            cur = self.apply(g, vars, cur, step)?;
        }
        Ok((cur, &self.steps[upto]))
    }

    fn apply(&self, g: &mut Graph, vars: &[Var], cur: Var, step: &Step) -> Result<Var> {
        match step {
            Step::MatMul(i) => g.matmul(cur, vars[*i]),
            Step::AddBias(i) => g.add(cur, vars[*i]),
            Step::MulConst(t) => {
                let c = g.constant(t.clone());
                g.mul(cur, c)
            }
            Step::Relu => g.relu(cur),
            Step::Softmax => g.softmax(cur),
            Step::LogSoftmax => g.log_softmax(cur),
            Step::LogOfSoftmax => {
                let s = g.softmax(cur)?;
                g.log(s, None)
            }
            Step::Scale(c) => g.scale(cur, *c),
            Step::Neg => g.neg(cur),
            Step::Clamp(lo, hi) => g.clamp(cur, *lo, *hi),
            Step::SubSelf => {
                let twice = g.scale(cur, 3.0)?;
                g.sub(twice, cur)
            }
        }
    }

    /// Builds the scalar output over `vars` (one per leaf, in order).
    pub fn build(&self, g: &mut Graph, vars: &[Var]) -> Result<Var> {
        let mut cur = self.input(g, vars)?;
        for step in &self.steps {
            cur = self.apply(g, vars, cur, step)?;
        }
        let r = g.constant(self.readout.clone());
        let weighted = g.mul(cur, r)?;
        if self.mean {
            g.mean(weighted)
        } else {
            g.sum(weighted)
        }
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn check(&self, tol: Tolerance) -> Result<GradReport> {
        check_gradients(&self.leaves, &self.wrt, |g, v| self.build(g, v), tol)
    }
}

/// Generates and checks `count` graphs seeded `base, base+1, ...`.
pub fn check_random_graphs(base: u64, count: usize, tol: Tolerance) -> Result<GradReport> {
    let mut total = GradReport::default();
    for i in 0..count {
        total.merge(RandomGraph::generate(base + i as u64)?.check(tol)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let r = check_gradients(
            &[x],
            &[true],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            Tolerance::default(),
        )
        .unwrap();
        assert!(r.passed());
        assert_eq!(r.entries, 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = RandomGraph::generate(7).unwrap();
        let b = RandomGraph::generate(7).unwrap();
        assert_eq!(a.leaves, b.leaves);
        assert_eq!(a.depth(), b.depth());
    }
}
