//! Deterministic synthetic connectome instances.
//!
//! All randomness comes from a ChaCha8 stream seeded with
//! `ChaCha8Rng::seed_from_u64(seed)`, so an identical config yields a
//! bit-identical [`Problem`].

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::dsc_sequential;
use crate::error::{Error, Result};
use crate::tensor::{
    precompute_offsets, validate, Dictionary, Dims, Index, PhiTensor, SignalVector, WeightVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub dims: Dims,
    /// Expected number of coefficients per voxel run once sorted by voxel.
    pub mean_run_length: f64,
    /// Fraction of fibers with a nonzero ground-truth weight.
    pub weight_density: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(dims: Dims, seed: u64) -> Self {
        GenConfig { dims, mean_run_length: 4.0, weight_density: 0.5, noise_sigma: 0.0, seed }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if let Err(m) = self.dims.check() {
            return bad(m);
        }
        if self.dims.n_coeffs == 0 {
            return bad("n_coeffs must be positive".into());
        }
        for (name, n) in [
            ("n_atoms", self.dims.n_atoms),
            ("n_voxels", self.dims.n_voxels),
            ("n_fibers", self.dims.n_fibers),
        ] {
            if n > Index::MAX as usize {
                return bad(format!("{name} does not fit 32-bit indices"));
            }
        }
        if !(self.mean_run_length >= 1.0 && self.mean_run_length <= self.dims.n_coeffs as f64) {
            return bad(format!("mean_run_length {} outside [1, n_coeffs]", self.mean_run_length));
        }
        if !(self.weight_density > 0.0 && self.weight_density <= 1.0) {
            return bad(format!("weight_density {} outside (0, 1]", self.weight_density));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }
}

/// A tensor, dictionary, signal, and (optionally) the weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub tensor: PhiTensor,
    pub dict: Dictionary,
    pub y: Option<SignalVector>,
    pub w_true: Option<WeightVector>,
    pub config: Option<GenConfig>,
}

impl Problem {
    pub fn dims(&self) -> &Dims {
        &self.tensor.dims
    }

    pub fn signal(&self) -> Result<&SignalVector> {
        self.y.as_ref().ok_or(Error::MissingSignal)
    }

    pub fn validate(&self) -> Result<()> {
        validate(
            &self.tensor,
            &self.dict,
            self.y.as_deref(),
            self.w_true.as_deref(),
        )?;
        Ok(())
    }
}

pub fn generate(config: &GenConfig) -> Result<Problem> {
    config.check()?;
    let dims = config.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let nc = dims.n_coeffs;

    // Voxel runs with geometric lengths (support >= 1, mean = mean_run_length).
    let geom = Geometric::new(1.0 / config.mean_run_length)
        .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let mut run_lengths = Vec::new();
    let mut total = 0usize;
    while total < nc {
        let len = (1 + geom.sample(&mut rng) as usize).min(nc - total);
        run_lengths.push(len);
        total += len;
    }
    // Distinct voxels per run when there are enough voxels; otherwise runs
    // sharing a voxel merge after sorting.
    let run_voxels: Vec<usize> = if run_lengths.len() <= dims.n_voxels {
        index::sample(&mut rng, dims.n_voxels, run_lengths.len()).into_vec()
    } else {
        (0..run_lengths.len()).map(|_| rng.gen_range(0..dims.n_voxels)).collect()
    };

    let mut coeffs: Vec<(Index, Index, Index, f64)> = Vec::with_capacity(nc);
    for (&len, &v) in run_lengths.iter().zip(&run_voxels) {
        for _ in 0..len {
            let a = rng.gen_range(0..dims.n_atoms) as Index;
            let f = rng.gen_range(0..dims.n_fibers) as Index;
            let value = 1.0 - rng.gen::<f64>();
            coeffs.push((a, v as Index, f, value));
        }
    }
    coeffs.shuffle(&mut rng);
    let tensor = PhiTensor::new(
        dims,
        coeffs.iter().map(|c| c.0).collect(),
        coeffs.iter().map(|c| c.1).collect(),
        coeffs.iter().map(|c| c.2).collect(),
        coeffs.iter().map(|c| c.3).collect(),
    )?;

    let mut dict_data = Vec::with_capacity(dims.n_atoms * dims.n_dirs);
    for _ in 0..dims.n_atoms {
        loop {
            let row: Vec<f64> = (0..dims.n_dirs).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                dict_data.extend(row.iter().map(|x| x / norm));
                break;
            }
        }
    }
    let dict = Dictionary::new(dims.n_atoms, dims.n_dirs, dict_data)?;

    let n_active = ((config.weight_density * dims.n_fibers as f64).round() as usize).clamp(1, dims.n_fibers);
    let mut w_true = vec![0.0; dims.n_fibers];
    for f in index::sample(&mut rng, dims.n_fibers, n_active) {
        w_true[f] = 1.0 - rng.gen::<f64>();
    }

    let offsets = precompute_offsets(tensor)?;
    let mut y = vec![0.0; dims.n_rows()];
    dsc_sequential(&offsets, &dict, &w_true, &mut y)?;
    if config.noise_sigma > 0.0 {
        for v in y.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += config.noise_sigma * z;
        }
    }

    Ok(Problem {
        tensor: offsets.into_tensor(),
        dict,
        y: Some(SignalVector(y)),
        w_true: Some(WeightVector(w_true)),
        config: Some(*config),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::restructure::{detect_runs, sort_by};
    use crate::tensor::{materialize_dense, Key};

    fn cfg(nv: usize, nf: usize, na: usize, nd: usize, nc: usize, seed: u64) -> GenConfig {
        GenConfig::new(
            Dims { n_atoms: na, n_voxels: nv, n_fibers: nf, n_dirs: nd, n_coeffs: nc },
            seed,
        )
    }

    #[test]
    fn same_seed_same_problem() {
        let c = cfg(30, 20, 10, 8, 300, 7);
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        let mut other = c;
        other.seed = 8;
        assert_ne!(generate(&c).unwrap().tensor, generate(&other).unwrap().tensor);
    }

    #[test]
    fn noiseless_signal_matches_dense() {
        let p = generate(&cfg(30, 20, 10, 8, 300, 3)).unwrap();
        let m = materialize_dense(&p.tensor, &p.dict).unwrap();
        let y = p.y.as_ref().unwrap();
        let expected = m.mul_vec(p.w_true.as_ref().unwrap());
        let resid: f64 = y.iter().zip(&expected).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = expected.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(resid <= 1e-12 * norm, "resid {resid} norm {norm}");
    }

    #[test]
    fn noise_perturbs_signal() {
        let mut c = cfg(30, 20, 10, 8, 300, 3);
        let clean = generate(&c).unwrap();
        c.noise_sigma = 0.1;
        let noisy = generate(&c).unwrap();
        assert_eq!(clean.tensor, noisy.tensor);
        assert_ne!(clean.y, noisy.y);
    }

    #[test]
    fn mean_run_length_is_respected() {
        let mut c = cfg(5000, 500, 50, 4, 10_000, 11);
        c.mean_run_length = 4.0;
        let p = generate(&c).unwrap();
        let (sorted, _) = sort_by(&p.tensor, Key::Voxel);
        let runs = detect_runs(&sorted, Key::Voxel).unwrap();
        let mean = runs.mean_length();
        assert!((3.5..=4.5).contains(&mean), "mean run length {mean}");
    }

    #[test]
    fn weight_density_and_dictionary_norms() {
        let mut c = cfg(30, 40, 10, 8, 300, 5);
        c.weight_density = 0.25;
        let p = generate(&c).unwrap();
        let w = p.w_true.unwrap();
        assert_eq!(w.iter().filter(|&&x| x > 0.0).count(), 10);
        assert!(w.iter().all(|&x| x >= 0.0));
        for a in 0..10 {
            let n: f64 = p.dict.atom(a).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(p.tensor.values.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = cfg(30, 20, 10, 8, 300, 1);
        let mut c = base;
        c.dims.n_dirs = 0;
        assert!(matches!(generate(&c), Err(Error::ConfigInvalid(_))));
        let mut c = base;
        c.mean_run_length = 0.5;
        assert!(generate(&c).is_err());
        let mut c = base;
        c.weight_density = 0.0;
        assert!(generate(&c).is_err());
        let mut c = base;
        c.noise_sigma = -1.0;
        assert!(generate(&c).is_err());
        let mut c = base;
        c.dims.n_coeffs = 0;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn seed_sweep_validates() {
        for seed in 0..100 {
            let p = generate(&cfg(20, 15, 6, 3, 120, seed)).unwrap();
            p.validate().unwrap();
        }
    }
}
