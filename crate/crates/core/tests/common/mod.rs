//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use geoseg::data::{build_dataset, DatasetSpec, Manifest, PhantomParams};
use geoseg::geometry::{ravel, BinaryMask};
use geoseg::geometry::SignMode;
use geoseg::losses::{
    cross_entropy_loss, dice_loss, geometry_consistency_loss, mutual_consistency_loss, ramp_up, sdf_supervised_loss,
    seg_supervised_loss, supervised_loss, total_loss, weighted_geometry_consistency_loss, ConsistencyMode,
    LossConfig, LossTargets,
};
use geoseg::network::{DualDecoderOutputs, Network, NetworkConfig};
use geoseg::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_mask(shape: &[usize], density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::from_fn(shape.to_vec(), |_| rng.random_bool(density))
}

/// A union of random axis-aligned boxes; has a boundary unless it fills the grid.
pub fn random_blob_mask(shape: &[usize], rng: &mut ChaCha8Rng) -> BinaryMask {
    let boxes: Vec<Vec<(usize, usize)>> = (0..rng.random_range(1..=3))
        .map(|_| {
            shape
                .iter()
                .map(|&e| {
                    let a = rng.random_range(0..e);
                    let b = rng.random_range(a..e);
                    (a, b)
                })
                .collect()
        })
        .collect();
    BinaryMask::from_fn(shape.to_vec(), |idx| {
        boxes
            .iter()
            .any(|b| idx.iter().zip(b).all(|(&i, &(lo, hi))| lo <= i && i <= hi))
    })
}

pub fn indices(shape: &[usize]) -> Vec<Vec<usize>> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|mut flat| {
            let mut idx = vec![0; shape.len()];
            for a in (0..shape.len()).rev() {
                idx[a] = flat % shape[a];
                flat /= shape[a];
            }
            idx
        })
        .collect()
}

fn sq_dist(a: &[usize], b: &[usize]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum()
}

/// Squared distance from every voxel to the nearest set voxel, by exhaustive search.
pub fn brute_squared_edt(mask: &BinaryMask) -> Vec<u64> {
    let idx = indices(mask.shape());
    let seeds: Vec<&Vec<usize>> = idx.iter().filter(|i| mask.get(i)).collect();
    idx.iter()
        .map(|p| seeds.iter().map(|s| sq_dist(p, s)).min().unwrap())
        .collect()
}

/// Foreground voxels with a face neighbour inside the grid that is background.
pub fn brute_boundary(mask: &BinaryMask) -> Vec<bool> {
    let shape = mask.shape();
    indices(shape)
        .iter()
        .map(|p| {
            if !mask.get(p) {
                return false;
            }
            (0..shape.len()).any(|a| {
                [-1i64, 1].iter().any(|&d| {
                    let q = p[a] as i64 + d;
                    if q < 0 || q >= shape[a] as i64 {
                        return false;
                    }
                    let mut n = p.clone();
                    n[a] = q as usize;
                    !mask.get(&n)
                })
            })
        })
        .collect()
}

/// Signed distance to the boundary set by exhaustive search: 0 on it, negative inside.
pub fn brute_sdm(mask: &BinaryMask) -> Vec<f64> {
    let shape = mask.shape();
    let idx = indices(shape);
    let b = brute_boundary(mask);
    let seeds: Vec<&Vec<usize>> = idx.iter().zip(&b).filter(|(_, &on)| on).map(|(i, _)| i).collect();
    idx.iter()
        .zip(&b)
        .map(|(p, &on)| {
            if on {
                return 0.0;
            }
            let d = (seeds.iter().map(|s| sq_dist(p, s)).min().unwrap() as f64).sqrt();
            if mask.get(p) {
                -d
            } else {
                d
            }
        })
        .collect()
}

/// Pooled symmetric surface distances by all-pairs search.
pub fn brute_surface(a: &BinaryMask, b: &BinaryMask) -> Option<Vec<f64>> {
    let idx = indices(a.shape());
    let sa: Vec<&Vec<usize>> = idx.iter().zip(brute_boundary(a)).filter(|(_, on)| *on).map(|(i, _)| i).collect();
    let sb: Vec<&Vec<usize>> = idx.iter().zip(brute_boundary(b)).filter(|(_, on)| *on).map(|(i, _)| i).collect();
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |p: &Vec<usize>, set: &[&Vec<usize>]| {
        (set.iter().map(|s| sq_dist(p, s)).min().unwrap() as f64).sqrt()
    };
    let mut d: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    d.extend(sb.iter().map(|p| nearest(p, &sa)));
    Some(d)
}

/// Sorted-order statistic with linear interpolation, written independently of the library.
pub fn brute_percentile(d: &[f64], q: f64) -> f64 {
    let mut v = d.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r = q / 100.0 * (v.len() as f64 - 1.0);
    let i = r as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (r - i as f64)) + v[i + 1] * (r - i as f64)
}

pub fn at(shape: &[usize], idx: &[usize]) -> usize {
    ravel(idx, shape)
}

/// Largest relative error between reverse-mode gradients and central differences.
///
/// `build` maps the input variables to a scalar loss. Every element of every
/// input is perturbed by `±h`. The error of one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradient_error(
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    build: impl Fn(&mut Tape, &[Var]) -> geoseg::Result<Var>,
) -> f64 {
    gradient_error_against(inputs, h, floor, &build, &build)
}

/// As [`gradient_error`], with central differences taken of `numeric` instead of `analytic`.
pub fn gradient_error_against(
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    analytic: &dyn Fn(&mut Tape, &[Var]) -> geoseg::Result<Var>,
    numeric: &dyn Fn(&mut Tape, &[Var]) -> geoseg::Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let loss = analytic(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
        let l = numeric(&mut t, &vs).unwrap();
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).unwrap();
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = g.data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// Contracts a tensor-valued op with a fixed random probe so it can be checked as a scalar.
pub fn probe(tape: &mut Tape, v: Var, seed: u64) -> geoseg::Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let r = random_tensor(&shape, &mut rng(seed), -1.0, 1.0);
    let c = tape.constant(r)?;
    let m = tape.mul(v, c)?;
    tape.sum(m)
}

/// A tiny dual-decoder network with a mixed batch: 2 labeled, 1 unlabeled item on 8 x 8.
pub struct ToyProblem {
    pub network: Network,
    pub input: Tensor,
    pub targets: LossTargets,
}

impl ToyProblem {
    pub fn new(seed: u64) -> Self {
        let network = Network::build(NetworkConfig {
            width: 2,
            depth: 1,
            seed,
            ..Default::default()
        })
        .unwrap();
        let mut r = rng(seed + 100);
        let input = random_tensor(&[3, 1, 8, 8], &mut r, -1.0, 1.0);
        let mut masks = Vec::new();
        let mut sdms = Vec::new();
        for _ in 0..2 {
            let m = random_blob_mask(&[8, 8], &mut r);
            let s = geoseg::geometry::signed_distance_map(&m).normalized();
            masks.extend(m.as_f64());
            sdms.extend(s.values);
        }
        let targets = LossTargets {
            labeled: 2,
            mask: Tensor::new(vec![2, 1, 8, 8], masks).unwrap(),
            sdm: Tensor::new(vec![2, 1, 8, 8], sdms).unwrap(),
        };
        ToyProblem { network, input, targets }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.network.parameters().iter().map(|p| p.value().clone()).collect()
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var]) -> geoseg::Result<DualDecoderOutputs> {
        let x = tape.constant(self.input.clone())?;
        self.network.forward(tape, x, p)
    }

    /// Worst relative gradient error of `loss` over every network parameter.
    pub fn gradient_error(&self, loss: impl Fn(&mut Tape, &DualDecoderOutputs) -> geoseg::Result<Var>) -> f64 {
        self.gradient_error_against(&loss, &loss)
    }

    pub fn gradient_error_against(
        &self,
        analytic: &dyn Fn(&mut Tape, &DualDecoderOutputs) -> geoseg::Result<Var>,
        numeric: &dyn Fn(&mut Tape, &DualDecoderOutputs) -> geoseg::Result<Var>,
    ) -> f64 {
        let a = |tape: &mut Tape, p: &[Var]| {
            let out = self.forward(tape, p)?;
            analytic(tape, &out)
        };
        let n = |tape: &mut Tape, p: &[Var]| {
            let out = self.forward(tape, p)?;
            numeric(tape, &out)
        };
        gradient_error_against(&self.params(), 1e-6, 1e-6, &a, &n)
    }

    /// Boundary weights `exp(-rho |d|)` of both decoders at the current parameters.
    pub fn frozen_weights(&self, rho: f64) -> [Tensor; 2] {
        let pred = self.network.predict(&self.input).unwrap();
        pred.sdm.map(|d| d.map(|v| (-rho * v.abs()).exp()))
    }

    /// Weighted cross-task consistency with the weights held fixed, written out op by op.
    pub fn frozen_wgc(
        tape: &mut Tape,
        out: &DualDecoderOutputs,
        w: &[Tensor; 2],
        k: f64,
    ) -> geoseg::Result<Var> {
        let mut terms = Vec::new();
        for (i, j) in [(0, 1), (1, 0)] {
            let z = tape.mul_scalar(out.sdm[j], -k)?;
            let inv = tape.sigmoid(z)?;
            let r = tape.sub(out.seg[i], inv)?;
            let sq = tape.square(r)?;
            let wc = tape.constant(w[i].clone())?;
            terms.push(tape.mul(wc, sq)?);
        }
        let s = tape.add(terms[0], terms[1])?;
        tape.mean(s)
    }

    pub fn total_loss_error(&self, cfg: &LossConfig, t: usize) -> f64 {
        self.gradient_error(|tape, out| Ok(total_loss(tape, out, &self.targets, t, 10, cfg)?.0))
    }
}

/// Builds a small dataset with default phantoms in `dir`.
pub fn small_dataset(dir: &std::path::Path, shape: &[usize], counts: (usize, usize, usize), seed: u64) -> Manifest {
    let spec = DatasetSpec {
        n_labeled: counts.0,
        n_unlabeled: counts.1,
        n_test: counts.2,
        shape: shape.to_vec(),
        seed,
        phantom: PhantomParams::default(),
    };
    build_dataset(dir, &spec, false).unwrap()
}

/// Worst relative gradient error of every loss term and of the total loss in each mode.
///
/// Network losses use the toy problem with `k = 5`; at the default slope the
/// logistic saturates and central differences lose all precision.
pub fn loss_gradient_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));

    let p = random_tensor(&[2, 1, 4, 4], &mut rng(8), 0.05, 0.95);
    let target = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| f64::from(i % 2)).collect()).unwrap();
    push("dice", gradient_error(&[p], 1e-6, 1e-6, |t, v| {
        let c = t.constant(target.clone())?;
        dice_loss(t, v[0], c, 1e-5)
    }));
    let two = random_tensor(&[2, 2, 4, 4], &mut rng(9), 0.05, 0.95);
    push("cross entropy", gradient_error(&[two], 1e-6, 1e-6, |t, v| cross_entropy_loss(t, v[0], &target)));

    let toy = ToyProblem::new(3);
    let (mask, sdm) = (&toy.targets.mask, &toy.targets.sdm);
    push("seg", toy.gradient_error(|t, out| {
        let l = out.narrow_batch(t, 0, 2)?;
        seg_supervised_loss(t, &l, mask, 1e-5)
    }));
    push("sdf", toy.gradient_error(|t, out| {
        let l = out.narrow_batch(t, 0, 2)?;
        let c = t.constant(sdm.clone())?;
        sdf_supervised_loss(t, &l, c)
    }));
    push("sup", toy.gradient_error(|t, out| {
        let l = out.narrow_batch(t, 0, 2)?;
        Ok(supervised_loss(t, &l, mask, sdm, 0.3, 1e-5)?.0)
    }));
    push("gc", toy.gradient_error(|t, out| geometry_consistency_loss(t, out, 5.0, SignMode::InsideNegative)));
    push("gc literal", toy.gradient_error(|t, out| geometry_consistency_loss(t, out, 5.0, SignMode::Literal)));
    let w = toy.frozen_weights(2.0);
    push("wgc", toy.gradient_error_against(
        &|t, out| weighted_geometry_consistency_loss(t, out, 2.0, 5.0, SignMode::InsideNegative),
        &|t, out| ToyProblem::frozen_wgc(t, out, &w, 5.0),
    ));
    push("mc", toy.gradient_error(|t, out| mutual_consistency_loss(t, out)));

    let toy = ToyProblem::new(4);
    for mode in [ConsistencyMode::None, ConsistencyMode::Mc, ConsistencyMode::Gc, ConsistencyMode::Wgc] {
        let cfg = LossConfig {
            consistency: mode,
            k: 5.0,
            lambda_max: 0.5,
            ..LossConfig::default()
        };
        let err = if mode == ConsistencyMode::Wgc {
            // the weights are constants of the graph, so differentiate with them frozen
            let w = toy.frozen_weights(cfg.rho);
            let lambda = ramp_up(7, 10, cfg.lambda_max, cfg.ramp_power);
            toy.gradient_error_against(
                &|t, out| Ok(total_loss(t, out, &toy.targets, 7, 10, &cfg)?.0),
                &|t, out| {
                    let l = out.narrow_batch(t, 0, 2)?;
                    let (sup, _, _) =
                        supervised_loss(t, &l, &toy.targets.mask, &toy.targets.sdm, cfg.beta, cfg.dice_eps)?;
                    let c = ToyProblem::frozen_wgc(t, out, &w, cfg.k)?;
                    let c = t.mul_scalar(c, lambda)?;
                    t.add(sup, c)
                },
            )
        } else {
            toy.total_loss_error(&cfg, 7)
        };
        push(&format!("total ({})", mode.as_str()), err);
    }
    out
}
