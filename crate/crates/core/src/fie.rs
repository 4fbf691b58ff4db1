//! Feature identity extraction: a small shared conv stack followed by a fixed
//! random projection onto the 128-d unit sphere, so that feature maps of
//! different networks and sizes can be compared directly.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand_distr::{Distribution, Normal};

use crate::autograd::{Eager, Ops};
use crate::error::{Error, Result};
use crate::nn::{self, ConvIds};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{Shape, Tensor};

pub const STORE_NAME: &str = "fie";
pub const LATENT_DIM: usize = 128;
pub const CONV_CHANNELS: [usize; 3] = [32, 64, 64];
/// Lower bound on the norm before normalisation.
pub const NORM_FLOOR: f64 = 1e-8;
/// Largest accepted deviation from unit norm for loss inputs.
pub const UNIT_TOLERANCE: f64 = 1e-3;

/// The `[LATENT_DIM, flatten_dim]` matrix with i.i.d. `N(0, 1/flatten_dim)`
/// entries determined by `projection_seed` and `flatten_dim` alone.
pub fn projection_matrix<S: Scalar>(projection_seed: u64, flatten_dim: usize) -> Tensor<S> {
    let mut rng = seed::rng_for(projection_seed, &format!("projection/{flatten_dim}"));
    let normal = Normal::new(0.0, (1.0 / flatten_dim as f64).sqrt()).expect("positive deviation");
    let data = (0..LATENT_DIM * flatten_dim).map(|_| S::lit(normal.sample(&mut rng))).collect();
    Tensor::from_vec(Shape::new(LATENT_DIM, flatten_dim, 1, 1), data).expect("matrix shape")
}

/// Trainable conv stack `φ` plus lazily built, never-trained projections.
///
/// The first convolution is kept per distinct input channel count so that
/// branches with different widths can share the rest of the stack; when
/// both branches have the same width all of `φ` is shared.
#[derive(Clone, Debug)]
pub struct IdentityProjector<S> {
    store: ParamStore<S>,
    stems: BTreeMap<usize, ConvIds>,
    body: [ConvIds; 2],
    projection_seed: u64,
    matrices: RefCell<BTreeMap<usize, Rc<Tensor<S>>>>,
}

impl<S: Scalar> IdentityProjector<S> {
    pub fn new(branch_channels: &[usize], seed_: u64) -> Result<Self> {
        let mut channels: Vec<usize> = branch_channels.to_vec();
        channels.sort_unstable();
        channels.dedup();
        if channels.is_empty() || channels[0] == 0 {
            return Err(Error::InvalidParameter(format!("identity branches need positive channel counts, got {branch_channels:?}")));
        }
        let mut store = ParamStore::new(STORE_NAME);
        let [c0, c1, c2] = CONV_CHANNELS;
        let mut stems = BTreeMap::new();
        for &c in &channels {
            let prefix = if channels.len() == 1 { "conv0".to_string() } else { format!("conv0.in{c}") };
            stems.insert(c, ConvIds::add(&mut store, &prefix, Shape::new(c0, c, 3, 3), true, false, seed_));
        }
        let body = [
            ConvIds::add(&mut store, "conv1", Shape::new(c1, c0, 3, 3), true, false, seed_),
            ConvIds::add(&mut store, "conv2", Shape::new(c2, c1, 3, 3), true, false, seed_),
        ];
        Ok(Self { store, stems, body, projection_seed: seed::derive(seed_, "projection"), matrices: RefCell::default() })
    }

    /// Rebuild around stored `φ` and a recorded projection seed.
    pub fn from_parts(branch_channels: &[usize], projection_seed: u64, store: &ParamStore<S>) -> Result<Self> {
        let mut p = Self::new(branch_channels, 0)?;
        p.store.load_from(store)?;
        p.projection_seed = projection_seed;
        Ok(p)
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection_seed
    }

    pub fn branch_channels(&self) -> Vec<usize> {
        self.stems.keys().copied().collect()
    }

    /// The projection for `flatten_dim`, built on first use.
    pub fn projection(&self, flatten_dim: usize) -> Rc<Tensor<S>> {
        self.matrices
            .borrow_mut()
            .entry(flatten_dim)
            .or_insert_with(|| Rc::new(projection_matrix(self.projection_seed, flatten_dim)))
            .clone()
    }

    /// Projections built so far, by flatten dimension.
    pub fn projections(&self) -> BTreeMap<usize, Rc<Tensor<S>>> {
        self.matrices.borrow().clone()
    }

    /// Map a `[C, N, H, W]` feature batch to `[LATENT_DIM, N, 1, 1]` unit vectors.
    pub fn forward<C: Ops<S>>(&self, ctx: &mut C, features: &C::V) -> Result<C::V> {
        let c = ctx.value(features).shape().c();
        let stem = *self.stems.get(&c).ok_or_else(|| {
            Error::Shape(format!("identity extractor built for channels {:?}, got {c}", self.branch_channels()))
        })?;
        let mut x = features.clone();
        for ids in std::iter::once(stem).chain(self.body) {
            let y = nn::conv(ctx, &self.store, ids, &x, 2, 1)?;
            x = ctx.relu(&y);
        }
        let s = ctx.value(&x).shape();
        let z = ctx.project(&x, &self.projection(s.c() * s.h() * s.w()))?;
        ctx.l2_normalize(&z, S::lit(NORM_FLOOR))
    }

    /// Value-only embedding of each sample in a feature batch.
    pub fn embed(&self, features: &Tensor<S>) -> Result<Vec<LatentIdentity>> {
        let mut ctx = Eager;
        let x = ctx.input(features.clone(), false);
        let z = self.forward(&mut ctx, &x)?;
        let n = z.shape().n();
        Ok((0..n).map(|i| LatentIdentity((0..LATENT_DIM).map(|d| z.at(d, i, 0, 0).to_f64_lossy()).collect())).collect())
    }
}

/// A point on the identity sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentIdentity(pub Vec<f64>);

impl LatentIdentity {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `‖a − b‖²` between unit vectors, in `[0, 4]`.
pub fn feature_identity_loss(a: &LatentIdentity, b: &LatentIdentity) -> Result<f64> {
    if a.0.len() != b.0.len() {
        return Err(Error::Shape(format!("identity lengths {} and {} differ", a.0.len(), b.0.len())));
    }
    for (name, z) in [("enhancer", a), ("task head", b)] {
        let n = z.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!("{name} identity has norm {n}, expected 1")));
        }
    }
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: Shape, s: u64) -> Tensor<f64> {
        let mut r = seed::rng(s);
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn unit(v: Vec<f64>) -> LatentIdentity {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        LatentIdentity(v.into_iter().map(|x| x / n).collect())
    }

    /// Direct loops: zero-padded stride-2 conv, ReLU, (c, y, x) flatten,
    /// product with a freshly generated matrix, division by the norm.
    fn oracle(p: &IdentityProjector<f64>, x: &Tensor<f64>, sample: usize) -> Vec<f64> {
        let s = x.shape();
        let mut cur: Vec<Vec<Vec<f64>>> =
            (0..s.c()).map(|c| (0..s.h()).map(|y| (0..s.w()).map(|xx| x.at(c, sample, y, xx)).collect()).collect()).collect();
        for name in ["conv0", "conv1", "conv2"] {
            let w = p.store.get(p.store.find(&format!("{name}.w")).unwrap());
            let b = p.store.get(p.store.find(&format!("{name}.b")).unwrap());
            let (co, ci) = (w.shape().c(), w.shape().n());
            let (h, wd) = (cur[0].len(), cur[0][0].len());
            let (oh, ow) = ((h + 2 - 3) / 2 + 1, (wd + 2 - 3) / 2 + 1);
            let mut next = vec![vec![vec![0.0; ow]; oh]; co];
            for (o, plane) in next.iter_mut().enumerate() {
                for (oy, row) in plane.iter_mut().enumerate() {
                    for (ox, v) in row.iter_mut().enumerate() {
                        let mut acc = b.data()[o];
                        for i in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at(o, i, ky, kx) * cur[i][iy as usize][ix as usize];
                                    }
                                }
                            }
                        }
                        *v = acc.max(0.0);
                    }
                }
            }
            cur = next;
        }
        let flat: Vec<f64> = cur.iter().flatten().flatten().copied().collect();
        let m: Tensor<f64> = projection_matrix(p.projection_seed(), flat.len());
        let z: Vec<f64> = (0..LATENT_DIM).map(|d| (0..flat.len()).map(|f| m.data()[d * flat.len() + f] * flat[f]).sum()).collect();
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        z.into_iter().map(|v| v / n).collect()
    }

    #[test]
    fn matches_step_by_step_oracle() {
        let p = IdentityProjector::<f64>::new(&[32], 9).unwrap();
        let x = random(Shape::new(32, 2, 16, 16), 4);
        let got = p.embed(&x).unwrap();
        for (i, z) in got.iter().enumerate() {
            let want = oracle(&p, &x, i);
            let diff = z.0.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "sample {i}: {diff}");
            assert!((z.norm() - 1.0).abs() < 1e-6);
        }
        assert_eq!(got, p.embed(&x).unwrap());
    }

    #[test]
    fn recorded_seed_rebuilds_matrices() {
        let p = IdentityProjector::<f32>::new(&[32], 3).unwrap();
        let m = p.projection(256);
        let again = IdentityProjector::<f32>::from_parts(&[32], p.projection_seed(), p.store()).unwrap();
        assert_eq!(*again.projection(256), *m);
        let var = m.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / m.len() as f64;
        assert!((var - 1.0 / 256.0).abs() < 0.1 / 256.0, "{var}");
        assert_ne!(*p.projection(64), projection_matrix::<f32>(p.projection_seed() ^ 1, 64));
    }

    #[test]
    fn zero_features_do_not_divide_by_zero() {
        let p = IdentityProjector::<f32>::new(&[4], 1).unwrap();
        let mut store = p.store().clone();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let p = IdentityProjector::from_parts(&[4], 1, &store).unwrap();
        let z = p.embed(&Tensor::zeros(Shape::new(4, 1, 8, 8))).unwrap();
        assert!(z[0].0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn branches_of_different_width_share_the_body() {
        let p = IdentityProjector::<f64>::new(&[32, 48], 2).unwrap();
        assert_eq!(p.branch_channels(), vec![32, 48]);
        let a = p.embed(&random(Shape::new(32, 1, 16, 16), 1)).unwrap();
        let b = p.embed(&random(Shape::new(48, 1, 4, 4), 2)).unwrap();
        let l = feature_identity_loss(&a[0], &b[0]).unwrap();
        assert!((0.0..=4.0).contains(&l));
        assert!(p.embed(&random(Shape::new(5, 1, 8, 8), 1)).is_err());
        assert_eq!(p.projections().keys().copied().collect::<Vec<_>>(), vec![64, 256]);
    }

    #[test]
    fn loss_analytic_cases() {
        let e = |i: usize| {
            let mut v = vec![0.0; LATENT_DIM];
            v[i] = 1.0;
            LatentIdentity(v)
        };
        assert_eq!(feature_identity_loss(&e(0), &e(0)).unwrap(), 0.0);
        assert_eq!(feature_identity_loss(&e(0), &e(1)).unwrap(), 2.0);
        let neg = LatentIdentity(e(3).0.iter().map(|v| -v).collect());
        assert_eq!(feature_identity_loss(&e(3), &neg).unwrap(), 4.0);
        let long = LatentIdentity(vec![0.2; LATENT_DIM]);
        assert!(matches!(feature_identity_loss(&e(0), &long), Err(Error::Contract(_))));
        assert!(feature_identity_loss(&e(0), &LatentIdentity(vec![1.0])).is_err());
    }

    #[test]
    fn gradients_reach_convs_not_projection() {
        let p = IdentityProjector::<f64>::new(&[8], 5).unwrap();
        let before = p.projection(64 * 4);
        let mut tape = Tape::new();
        let a = tape.input(random(Shape::new(8, 2, 16, 16), 1), true);
        let b = tape.input(random(Shape::new(8, 2, 16, 16), 2), false);
        let za = p.forward(&mut tape, &a).unwrap();
        let zb = p.forward(&mut tape, &b).unwrap();
        let d = tape.sq_dist(&za, &zb).unwrap();
        let loss = tape.mean(&d);
        let g = tape.backward(loss, &[a]);
        let grads = g.for_store(p.store());
        assert_eq!(grads.len(), p.store().len());
        assert!(grads.iter().all(|g| g.is_some_and(|t| t.sum_squares() > 0.0)));
        assert!(g.var(a).unwrap().sum_squares() > 0.0);
        assert_eq!(*p.projection(64 * 4), *before);
    }

    proptest! {
        #[test]
        fn loss_is_two_minus_two_cosine(a in proptest::collection::vec(-1.0f64..1.0, 16), b in proptest::collection::vec(-1.0f64..1.0, 16)) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let (a, b) = (unit(a), unit(b));
            let cos: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
            let l = feature_identity_loss(&a, &b).unwrap();
            prop_assert!((l - (2.0 - 2.0 * cos)).abs() < 1e-12);
            prop_assert!((-1e-12..=4.0 + 1e-12).contains(&l));
        }

        #[test]
        fn embeddings_are_unit(s in 0u64..200, h in 1usize..12, w in 1usize..12) {
            let p = IdentityProjector::<f64>::new(&[3], 7).unwrap();
            for z in p.embed(&random(Shape::new(3, 2, h, w), s)).unwrap() {
                prop_assert!((z.norm() - 1.0).abs() < 1e-6);
            }
        }
    }
}
