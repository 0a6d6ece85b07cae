//! Two-hidden-layer ReLU network producing one log score per item.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::QueryInstance;
use crate::error::{Error, Result};
use crate::pl::ScoreVector;

pub const HIDDEN: usize = 32;

/// Weights are row-major with one row per output unit: `w1[h * F + f]`,
/// `w2[o * HIDDEN + h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub input_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

struct Activations {
    z1: [f64; HIDDEN],
    a1: [f64; HIDDEN],
    z2: [f64; HIDDEN],
    a2: [f64; HIDDEN],
    out: f64,
}

impl MlpParams {
    pub fn zeros(input_dim: usize) -> Self {
        Self {
            input_dim,
            w1: vec![0.0; input_dim * HIDDEN],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; HIDDEN * HIDDEN],
            b2: vec![0.0; HIDDEN],
            w3: vec![0.0; HIDDEN],
            b3: 0.0,
        }
    }

    /// He-uniform weights, `U(±sqrt(6 / fan_in))`, zero biases.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim);
        let mut fill = |w: &mut [f64], fan_in: usize| {
            let a = (6.0 / fan_in.max(1) as f64).sqrt();
            w.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
        };
        fill(&mut p.w1, input_dim);
        fill(&mut p.w2, HIDDEN);
        fill(&mut p.w3, HIDDEN);
        p
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + 1
    }

    /// All parameters in a fixed order: w1, b1, w2, b2, w3, b3.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(&self.w3);
        v.push(self.b3);
        v
    }

    pub fn from_flat(input_dim: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(input_dim);
        if flat.len() != p.n_params() {
            return Err(Error::LengthMismatch {
                expected: p.n_params(),
                found: flat.len(),
            });
        }
        let mut rest = flat;
        for part in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2, &mut p.w3] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
        p.b3 = rest[0];
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.b3.is_finite()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        let pairs = [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
            (&mut self.w3, &other.w3),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        self.b3 += scale * other.b3;
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Activations {
        let f = self.input_dim;
        let mut act = Activations {
            z1: [0.0; HIDDEN],
            a1: [0.0; HIDDEN],
            z2: [0.0; HIDDEN],
            a2: [0.0; HIDDEN],
            out: self.b3,
        };
        for h in 0..HIDDEN {
            let row = &self.w1[h * f..(h + 1) * f];
            let z = self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            act.z1[h] = z;
            act.a1[h] = z.max(0.0);
        }
        for o in 0..HIDDEN {
            let row = &self.w2[o * HIDDEN..(o + 1) * HIDDEN];
            let z = self.b2[o] + row.iter().zip(&act.a1).map(|(w, v)| w * v).sum::<f64>();
            act.z2[o] = z;
            act.a2[o] = z.max(0.0);
        }
        act.out += self.w3.iter().zip(&act.a2).map(|(w, v)| w * v).sum::<f64>();
        act
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.forward(x).out)
    }

    pub fn forward_scores(&self, q: &QueryInstance) -> Result<ScoreVector> {
        let scores = q
            .items
            .iter()
            .map(|it| self.score(&it.features))
            .collect::<Result<Vec<_>>>()?;
        ScoreVector::new(scores)
    }

    /// Gradient of `Σ_d upstream[d] · m(d)` with respect to every parameter.
    pub fn backward_chain(&self, q: &QueryInstance, upstream: &[f64]) -> Result<MlpParams> {
        if upstream.len() != q.len() {
            return Err(Error::LengthMismatch {
                expected: q.len(),
                found: upstream.len(),
            });
        }
        let f = self.input_dim;
        let mut g = MlpParams::zeros(f);
        for (item, &u) in q.items.iter().zip(upstream) {
            self.check_dim(&item.features)?;
            if u == 0.0 {
                continue;
            }
            let x = &item.features;
            let act = self.forward(x);
            g.b3 += u;
            let mut d2 = [0.0; HIDDEN];
            for o in 0..HIDDEN {
                g.w3[o] += u * act.a2[o];
                if act.z2[o] > 0.0 {
                    d2[o] = u * self.w3[o];
                }
            }
            let mut d1 = [0.0; HIDDEN];
            for o in 0..HIDDEN {
                if d2[o] == 0.0 {
                    continue;
                }
                g.b2[o] += d2[o];
                let row = &self.w2[o * HIDDEN..(o + 1) * HIDDEN];
                let grow = &mut g.w2[o * HIDDEN..(o + 1) * HIDDEN];
                for h in 0..HIDDEN {
                    grow[h] += d2[o] * act.a1[h];
                    d1[h] += d2[o] * row[h];
                }
            }
            for h in 0..HIDDEN {
                if act.z1[h] <= 0.0 || d1[h] == 0.0 {
                    continue;
                }
                g.b1[h] += d1[h];
                let grow = &mut g.w1[h * f..(h + 1) * f];
                for (gw, xv) in grow.iter_mut().zip(x) {
                    *gw += d1[h] * xv;
                }
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::domain::Item;

    fn query(features: Vec<Vec<f64>>) -> QueryInstance {
        let items = features
            .into_iter()
            .enumerate()
            .map(|(i, x)| Item {
                item_id: i.to_string(),
                features: x,
                label: 0.0,
                relevance_true: 0.0,
                relevance_observed: 0.0,
                group: 0,
            })
            .collect();
        QueryInstance::new("q", items, 1).unwrap()
    }

    fn random_query(n: usize, f: usize, rng: &mut ChaCha8Rng) -> QueryInstance {
        query((0..n).map(|_| (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut p = MlpParams::zeros(3);
        p.b3 = 0.7;
        let q = query(vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 5.0]]);
        assert_eq!(p.forward_scores(&q).unwrap().as_slice(), &[0.7, 0.7]);
        assert!(matches!(
            p.forward_scores(&query(vec![vec![1.0]])),
            Err(Error::DimMismatch { expected: 3, found: 1 })
        ));
    }

    #[test]
    fn identical_features_and_head_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = MlpParams::init(4, &mut rng);
        p.b3 = 0.3;
        let q = query(vec![vec![0.1, -0.2, 0.3, 0.9], vec![0.1, -0.2, 0.3, 0.9], vec![1.0, 1.0, -1.0, 0.0]]);
        let s = p.forward_scores(&q).unwrap();
        let s = s.as_slice().to_vec();
        assert_eq!(s[0], s[1]);
        let mut doubled = p.clone();
        doubled.w3.iter_mut().for_each(|w| *w *= 2.0);
        let s2 = doubled.forward_scores(&q).unwrap().as_slice().to_vec();
        for d in 0..3 {
            assert!(((s2[d] - 0.3) - 2.0 * (s[d] - 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_or_cancelling_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::init(3, &mut rng);
        let q = random_query(4, 3, &mut rng);
        assert!(p.backward_chain(&q, &[0.0; 4]).unwrap().flatten().iter().all(|&g| g == 0.0));
        let twins = query(vec![vec![0.2, 0.4, -0.1]; 2]);
        let g = p.backward_chain(&twins, &[1.5, -1.5]).unwrap();
        assert!(g.w3.iter().all(|w| w.abs() < 1e-12) && g.b3.abs() < 1e-12);
        assert!(p.backward_chain(&q, &[1.0]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MlpParams::init(5, &mut rng);
        assert_eq!(MlpParams::from_flat(5, &p.flatten()).unwrap(), p);
        assert!(MlpParams::from_flat(4, &p.flatten()).is_err());
    }

    fn objective(p: &MlpParams, q: &QueryInstance, up: &[f64]) -> f64 {
        let s = p.forward_scores(q).unwrap();
        up.iter().zip(s.as_slice()).map(|(u, m)| u * m).sum()
    }

    /// Central differences of `Σ_d u_d m(d)`; kinks are avoided by only
    /// comparing coordinates where the one-sided slopes agree.
    fn check_fd(seed: u64, n: usize, f: usize, h: f64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MlpParams::init(f, &mut rng);
        p.b1.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        p.b2.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        let q = random_query(n, f, &mut rng);
        let up: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = p.backward_chain(&q, &up).unwrap().flatten();
        let base = p.flatten();
        let f0 = objective(&p, &q, &up);
        for (i, &gi) in g.iter().enumerate() {
            let at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                objective(&MlpParams::from_flat(f, &v).unwrap(), &q, &up)
            };
            let (fp, fm) = (at(h), at(-h));
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            if (right - left).abs() > 1e-6 * (1.0 + right.abs()) {
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let scale = gi.abs().max(fd.abs()).max(1e-3);
            assert!((fd - gi).abs() / scale < tol, "param {i}: analytic {gi}, fd {fd}");
        }
    }

    #[test]
    fn single_item_matches_finite_differences() {
        check_fd(7, 1, 4, 1e-5, 1e-5);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn backprop_matches_finite_differences(seed in 0u64..10_000, n in 1usize..5, f in 1usize..6) {
            check_fd(seed, n, f, 1e-4, 1e-4);
        }
    }
}
