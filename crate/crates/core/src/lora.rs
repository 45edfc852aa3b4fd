//! Low-rank adaptors on the attention projections.
//!
//! Each adaptor contributes `(α/r)·B·A` to its site's weight. The delta is
//! applied at forward time as two thin products and never folded into the
//! bundle, which stays frozen.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::unet::{FactorGrads, LoraFactors, SiteFactors, SITES};
use crate::backbone::BackboneBundle;
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Tensor32};

const ADAPTOR_MAGIC: &[u8] = b"SILORA-AD";
const ADAPTOR_VERSION: u32 = 1;

/// One site's trainable factor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdaptor {
    site: String,
    /// `r × d_in`
    a: Tensor32,
    /// `d_out × r`
    b: Tensor32,
    alpha: f32,
}

impl LoraAdaptor {
    pub fn new(site: impl Into<String>, a: Tensor32, b: Tensor32, alpha: f32) -> Result<Self> {
        let (r, d_in) = a.dims2()?;
        let (d_out, rb) = b.dims2()?;
        if r != rb {
            return Err(Error::Shape(format!("A has rank {r}, B has rank {rb}")));
        }
        if r == 0 || r > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "rank {r} outside 1..={} for a {d_out}x{d_in} projection",
                d_in.min(d_out)
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            site: site.into(),
            a,
            b,
            alpha,
        })
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    /// `α / r`
    pub fn scale(&self) -> f64 {
        f64::from(self.alpha) / self.rank() as f64
    }

    pub fn a(&self) -> &Tensor32 {
        &self.a
    }

    pub fn b(&self) -> &Tensor32 {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor32 {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor32 {
        &mut self.b
    }

    pub fn num_parameters(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn factors(&self) -> LoraFactors {
        LoraFactors {
            a: self.a.to_mat().expect("A is a matrix"),
            b: self.b.to_mat().expect("B is a matrix"),
            scale: self.scale(),
        }
    }

    /// The dense `(α/r)·B·A`; for inspection only, never used on the forward path.
    pub fn materialized_delta(&self) -> Mat {
        let f = self.factors();
        let mut d = f.b.matmul(&f.a);
        d.scale(f.scale);
        d
    }
}

/// `W·x + (α/r)·B·(A·x)` for every row `x` of `x`.
pub fn adapted_projection(x: &Mat, w: &Mat, a: &LoraAdaptor) -> Result<Mat> {
    if x.cols() != w.cols() || w.cols() != a.d_in() || w.rows() != a.d_out() {
        return Err(Error::Shape(format!(
            "input width {}, weight {}x{}, adaptor {}x{}",
            x.cols(),
            w.rows(),
            w.cols(),
            a.d_out(),
            a.d_in()
        )));
    }
    let f = a.factors();
    let mut y = x.matmul_t(w);
    let xa = x.matmul_t(&f.a);
    y.add_scaled(&xa.matmul_t(&f.b), f.scale);
    Ok(y)
}

/// Adaptors keyed by site name. An empty set means "no adaptation".
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdaptorSet {
    rank: usize,
    alpha: f32,
    adaptors: BTreeMap<String, LoraAdaptor>,
}

impl AdaptorSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_adaptors(rank: usize, alpha: f32, adaptors: Vec<LoraAdaptor>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for a in adaptors {
            if a.rank() != rank || a.alpha() != alpha {
                return Err(Error::Config(format!(
                    "adaptor {} has rank {} / alpha {}, set expects {rank} / {alpha}",
                    a.site(),
                    a.rank(),
                    a.alpha()
                )));
            }
            if map.insert(a.site.clone(), a).is_some() {
                return Err(Error::Config("duplicate adaptor site".into()));
            }
        }
        Ok(Self {
            rank,
            alpha,
            adaptors: map,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.adaptors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.adaptors.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn get(&self, site: &str) -> Option<&LoraAdaptor> {
        self.adaptors.get(site)
    }

    pub fn get_mut(&mut self, site: &str) -> Option<&mut LoraAdaptor> {
        self.adaptors.get_mut(site)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdaptor> {
        self.adaptors.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdaptor> {
        self.adaptors.values_mut()
    }

    pub fn num_parameters(&self) -> usize {
        self.iter().map(LoraAdaptor::num_parameters).sum()
    }

    /// 64-bit factors in U-Net site order, validated against the bundle.
    pub(crate) fn factors_for(&self, bundle: &BackboneBundle) -> Result<SiteFactors> {
        if self.is_empty() {
            return Ok(vec![None; SITES.len()]);
        }
        let g = bundle.geometry();
        if self.adaptors.len() != g.sites.len() || g.sites.iter().any(|s| !self.adaptors.contains_key(&s.name)) {
            let have: Vec<_> = self.adaptors.keys().collect();
            return Err(Error::Config(format!(
                "adaptor sites {have:?} do not match the bundle's attention sites"
            )));
        }
        SITES
            .iter()
            .map(|&name| {
                let a = &self.adaptors[name];
                let spec = g.site(name).expect("site checked above");
                if (a.d_in(), a.d_out()) != (spec.d_in, spec.d_out) {
                    return Err(Error::Config(format!(
                        "adaptor {name} is {}x{}, site is {}x{}",
                        a.d_out(),
                        a.d_in(),
                        spec.d_out,
                        spec.d_in
                    )));
                }
                Ok(Some(a.factors()))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(ADAPTOR_MAGIC, ADAPTOR_VERSION);
        w.u32(self.rank as u32);
        w.f32(self.alpha);
        w.u32(self.adaptors.len() as u32);
        for a in self.adaptors.values() {
            w.str(&a.site);
            w.u32(a.d_in() as u32);
            w.u32(a.d_out() as u32);
            w.values(&a.a);
            w.values(&a.b);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, ADAPTOR_MAGIC, path)?;
        if version != ADAPTOR_VERSION {
            return Err(Error::Incompatible(format!(
                "adaptor format version {version}, expected {ADAPTOR_VERSION}"
            )));
        }
        let rank = r.u32()? as usize;
        let alpha = r.f32()?;
        let n = r.u32()? as usize;
        let mut adaptors = Vec::new();
        for _ in 0..n {
            let site = r.str()?;
            let d_in = r.u32()? as usize;
            let d_out = r.u32()? as usize;
            let a = r.values(vec![rank, d_in])?;
            let b = r.values(vec![d_out, rank])?;
            adaptors.push(LoraAdaptor::new(site, a, b, alpha)?);
        }
        r.finish()?;
        Self::from_adaptors(rank, alpha, adaptors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// One adaptor per attention projection of the bundle: `A ~ U(±1/√d_in)`, `B = 0`.
pub fn init_adaptor_set(bundle: &BackboneBundle, rank: usize, alpha: f32, seed: u64) -> Result<AdaptorSet> {
    let sites = &bundle.geometry().sites;
    let min_dim = sites.iter().map(|s| s.d_in.min(s.d_out)).min().unwrap_or(0);
    if rank == 0 || rank > min_dim {
        return Err(Error::Config(format!("LoRA rank {rank} outside 1..={min_dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut adaptors = Vec::with_capacity(sites.len());
    for s in sites {
        let bound = 1.0 / (s.d_in as f32).sqrt();
        let a_data = (0..rank * s.d_in).map(|_| rng.random_range(-bound..bound)).collect();
        let a = Tensor32::new(vec![rank, s.d_in], a_data)?;
        let b = Tensor32::zeros(vec![s.d_out, rank]);
        adaptors.push(LoraAdaptor::new(s.name.clone(), a, b, alpha)?);
    }
    AdaptorSet::from_adaptors(rank, alpha, adaptors)
}

/// Every trainable array, named `<site>.lora_a` / `<site>.lora_b`, and nothing else.
pub fn trainable_parameters(s: &AdaptorSet) -> Vec<(String, &Tensor32)> {
    s.iter()
        .flat_map(|a| {
            [
                (format!("{}.lora_a", a.site), &a.a),
                (format!("{}.lora_b", a.site), &a.b),
            ]
        })
        .collect()
}

/// Gradients in the same layout as [`trainable_parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorGrads {
    pub(crate) sites: Vec<(String, FactorGrads)>,
}

impl AdaptorGrads {
    pub(crate) fn from_site_grads(grads: Vec<Option<FactorGrads>>) -> Self {
        let sites = SITES
            .iter()
            .zip(grads)
            .filter_map(|(name, g)| g.map(|g| (name.to_string(), g)))
            .collect();
        Self { sites }
    }

    /// All-zero gradients shaped like `set`.
    pub fn zeros_like(set: &AdaptorSet) -> Self {
        let sites = set
            .iter()
            .map(|a| {
                let g = FactorGrads {
                    a: Mat::zeros(a.rank(), a.d_in()),
                    b: Mat::zeros(a.d_out(), a.rank()),
                };
                (a.site().to_string(), g)
            })
            .collect();
        Self { sites }
    }

    /// `(dA, dB)` for a site.
    pub fn site(&self, name: &str) -> Option<(&Mat, &Mat)> {
        self.sites.iter().find(|(n, _)| n == name).map(|(_, g)| (&g.a, &g.b))
    }

    /// Flat gradient arrays in [`trainable_parameters`] order.
    pub fn flat(&self) -> Vec<(String, &Mat)> {
        let mut v: Vec<_> = self
            .sites
            .iter()
            .flat_map(|(n, g)| [(format!("{n}.lora_a"), &g.a), (format!("{n}.lora_b"), &g.b)])
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn max_abs(&self) -> f64 {
        self.sites
            .iter()
            .map(|(_, g)| g.a.max_abs().max(g.b.max_abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn adaptor(a: &Mat, b: &Mat, alpha: f32) -> LoraAdaptor {
        LoraAdaptor::new("site", Tensor32::from_mat(a), Tensor32::from_mat(b), alpha).unwrap()
    }

    #[test]
    fn zero_b_gives_base_projection() {
        let x = mat(3, 8, 1);
        let w = mat(6, 8, 2);
        let a = adaptor(&mat(2, 8, 3), &Mat::zeros(6, 2), 2.0);
        assert_eq!(adapted_projection(&x, &w, &a).unwrap(), x.matmul_t(&w));
    }

    #[test]
    fn identity_factors_add_identity() {
        let x = mat(4, 5, 4);
        let w = mat(5, 5, 5);
        let a = adaptor(&Mat::identity(5), &Mat::identity(5), 5.0);
        let mut w_plus_i = w.clone();
        w_plus_i.add_assign(&Mat::identity(5));
        let got = adapted_projection(&x, &w, &a).unwrap();
        let want = x.matmul_t(&w_plus_i);
        for (g, e) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let a = adaptor(&mat(2, 8, 3), &Mat::zeros(6, 2), 2.0);
        let err = adapted_projection(&mat(1, 7, 0), &mat(6, 7, 0), &a).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn rank_above_dims_is_rejected() {
        let err = LoraAdaptor::new("s", Tensor32::zeros(vec![5, 4]), Tensor32::zeros(vec![4, 5]), 1.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
