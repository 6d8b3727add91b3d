//! Environment generation and the random processes driving a simulation:
//! regressors, measurements and link noise.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkTopology;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("parameter dimension must be positive")]
    ZeroDimension,
    #[error("link-noise gap must be a non-negative number of dB, got {0}")]
    InvalidGap(f64),
    #[error("invalid range {name}: [{lo}, {hi}]")]
    InvalidRange { name: &'static str, lo: f64, hi: f64 },
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("regressor variance {value} at node {node} must be strictly positive")]
    NonPositiveRegressorVariance { node: usize, value: f64 },
    #[error("variance {value} for {what} must be non-negative")]
    NegativeVariance { what: &'static str, value: f64 },
    #[error("no link from node {from} to node {to}")]
    NotALink { from: usize, to: usize },
}

/// Which consumer a random stream feeds. Distinct purposes never share
/// generator output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamPurpose {
    Topology = 1,
    Environment = 2,
    Regressor = 3,
    MeasurementNoise = 4,
    LinkNoiseFirst = 5,
    LinkNoiseSecond = 6,
    SelectionFirst = 7,
    SelectionSecond = 8,
    KronSampling = 9,
}

/// A reproducible random stream, identified by `(seed, purpose, index)`.
///
/// Backed by ChaCha8 with the purpose and index packed into the 64-bit
/// stream selector, so streams with different labels are independent and a
/// given label always replays the same sequence.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, purpose: StreamPurpose, index: u64) -> Self {
        assert!(index < (1 << 56), "stream index {index} too large");
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream((index << 8) | purpose as u64);
        Self { inner }
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }
}

impl RngCore for RngStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    /// Exchange of `w_{l,i-1}` in the first combination.
    W,
    /// Exchange of `ψ_{l,i}` in the second combination.
    Psi,
}

/// Noise variances of one directed link `from -> to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkVariances {
    pub from: usize,
    pub to: usize,
    pub w: f64,
    pub psi: f64,
}

/// Statistics of the data and of every communication link. Regressor
/// covariances are diagonal and stored by their diagonals; link noise is
/// isotropic, `σ² I_M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub param_dim: usize,
    pub true_param: Vec<f64>,
    pub regressor_variances: Vec<Vec<f64>>,
    pub meas_noise_vars: Vec<f64>,
    /// One entry per directed link, in the topology's link order.
    pub links: Vec<LinkVariances>,
}

/// Draw ranges for [`generate_environment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub param_dim: usize,
    /// How far (dB) the network-average power of each link-noise type sits
    /// below the network-average measurement-noise power. `inf` gives ideal links.
    pub link_noise_gap_db: f64,
    pub seed: u64,
    /// `trace(R_{u,k}) / M` is drawn uniformly from this range.
    #[serde(default = "default_trace_per_dim")]
    pub trace_per_dim: [f64; 2],
    #[serde(default = "default_meas_noise_var")]
    pub meas_noise_var: [f64; 2],
    /// Relative spread of the diagonal entries of `R_{u,k}` before scaling
    /// to the drawn trace.
    #[serde(default = "default_diag_spread")]
    pub diag_spread: [f64; 2],
}

fn default_trace_per_dim() -> [f64; 2] {
    [0.5, 2.0]
}
fn default_meas_noise_var() -> [f64; 2] {
    [0.01, 0.1]
}
fn default_diag_spread() -> [f64; 2] {
    [0.5, 1.5]
}

impl EnvironmentSpec {
    pub fn new(param_dim: usize, link_noise_gap_db: f64, seed: u64) -> Self {
        Self {
            param_dim,
            link_noise_gap_db,
            seed,
            trace_per_dim: default_trace_per_dim(),
            meas_noise_var: default_meas_noise_var(),
            diag_spread: default_diag_spread(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.param_dim == 0 {
            return Err(DataError::ZeroDimension);
        }
        if self.link_noise_gap_db.is_nan() || self.link_noise_gap_db < 0.0 {
            return Err(DataError::InvalidGap(self.link_noise_gap_db));
        }
        let ranges = [
            ("trace_per_dim", self.trace_per_dim),
            ("meas_noise_var", self.meas_noise_var),
            ("diag_spread", self.diag_spread),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(DataError::InvalidRange { name, lo, hi });
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut RngStream, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws an environment for `topology`.
///
/// `w°` is Gaussian and normalized to unit norm, so a network started at zero
/// has an initial MSD of 0 dB. Link variances are drawn uniformly and then
/// rescaled per kind so their network average sits exactly
/// `link_noise_gap_db` below the average measurement-noise variance.
pub fn generate_environment(topology: &NetworkTopology, spec: &EnvironmentSpec) -> Result<Environment, DataError> {
    spec.validate()?;
    let n = topology.num_nodes();
    let m = spec.param_dim;
    let mut rng = RngStream::new(spec.seed, StreamPurpose::Environment, 0);

    let mut true_param: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
    let norm = true_param.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        true_param.iter_mut().for_each(|x| *x /= norm);
    } else {
        true_param[0] = 1.0;
    }

    let regressor_variances = (0..n)
        .map(|_| {
            let trace = m as f64 * uniform(&mut rng, spec.trace_per_dim);
            let raw: Vec<f64> = (0..m).map(|_| uniform(&mut rng, spec.diag_spread)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x * trace / total).collect()
        })
        .collect();
    let meas_noise_vars: Vec<f64> = (0..n).map(|_| uniform(&mut rng, spec.meas_noise_var)).collect();

    let num_links = topology.num_links();
    let mut raw_w: Vec<f64> = (0..num_links).map(|_| rng.random::<f64>()).collect();
    let mut raw_psi: Vec<f64> = (0..num_links).map(|_| rng.random::<f64>()).collect();
    let model_power = meas_noise_vars.iter().sum::<f64>() / n as f64;
    let target = if spec.link_noise_gap_db.is_infinite() {
        0.0
    } else {
        model_power * 10f64.powf(-spec.link_noise_gap_db / 10.0)
    };
    for raw in [&mut raw_w, &mut raw_psi] {
        let mean = raw.iter().sum::<f64>() / num_links.max(1) as f64;
        for v in raw.iter_mut() {
            *v = if target == 0.0 || mean == 0.0 { 0.0 } else { *v * target / mean };
        }
    }
    let links = topology
        .links()
        .zip(raw_w.into_iter().zip(raw_psi))
        .map(|((from, to), (w, psi))| LinkVariances { from, to, w, psi })
        .collect();

    Ok(Environment { param_dim: m, true_param, regressor_variances, meas_noise_vars, links })
}

impl Environment {
    /// Builds an environment from explicit statistics, checking every invariant
    /// against `topology`. `links` lists `(from, to, σ²_w, σ²_ψ)` for any subset
    /// of links; unlisted links are noiseless.
    pub fn from_parts(
        topology: &NetworkTopology,
        true_param: Vec<f64>,
        regressor_variances: Vec<Vec<f64>>,
        meas_noise_vars: Vec<f64>,
        links: &[(usize, usize, f64, f64)],
    ) -> Result<Self, DataError> {
        let n = topology.num_nodes();
        let m = true_param.len();
        if m == 0 {
            return Err(DataError::ZeroDimension);
        }
        let check_len = |what, got, expected| {
            if got == expected {
                Ok(())
            } else {
                Err(DataError::LengthMismatch { what, got, expected })
            }
        };
        check_len("regressor_variances", regressor_variances.len(), n)?;
        check_len("meas_noise_vars", meas_noise_vars.len(), n)?;
        for (node, r) in regressor_variances.iter().enumerate() {
            check_len("regressor variance diagonal", r.len(), m)?;
            if let Some(&value) = r.iter().find(|&&v| !(v > 0.0)) {
                return Err(DataError::NonPositiveRegressorVariance { node, value });
            }
        }
        if let Some(&value) = meas_noise_vars.iter().find(|&&v| !(v >= 0.0)) {
            return Err(DataError::NegativeVariance { what: "measurement noise", value });
        }
        let mut all: Vec<LinkVariances> =
            topology.links().map(|(from, to)| LinkVariances { from, to, w: 0.0, psi: 0.0 }).collect();
        for &(from, to, w, psi) in links {
            let j = topology.link_index(from, to).ok_or(DataError::NotALink { from, to })?;
            for value in [w, psi] {
                if !(value >= 0.0) {
                    return Err(DataError::NegativeVariance { what: "link noise", value });
                }
            }
            all[j].w = w;
            all[j].psi = psi;
        }
        Ok(Self { param_dim: m, true_param, regressor_variances, meas_noise_vars, links: all })
    }

    pub fn num_nodes(&self) -> usize {
        self.meas_noise_vars.len()
    }

    /// Largest eigenvalue of the (diagonal) regressor covariance at `node`.
    pub fn max_regressor_eigenvalue(&self, node: usize) -> f64 {
        self.regressor_variances[node].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn link_variance(&self, link: usize, kind: LinkKind) -> f64 {
        let l = &self.links[link];
        match kind {
            LinkKind::W => l.w,
            LinkKind::Psi => l.psi,
        }
    }

    pub fn has_link_noise(&self) -> bool {
        self.links.iter().any(|l| l.w > 0.0 || l.psi > 0.0)
    }

    /// Mean link-noise variance of one kind over all directed links.
    pub fn average_link_power(&self, kind: LinkKind) -> f64 {
        if self.links.is_empty() {
            return 0.0;
        }
        (0..self.links.len()).map(|j| self.link_variance(j, kind)).sum::<f64>() / self.links.len() as f64
    }

    pub fn average_model_noise_power(&self) -> f64 {
        self.meas_noise_vars.iter().sum::<f64>() / self.num_nodes() as f64
    }

    /// Multiplies every link-noise variance by `factor`.
    pub fn scale_link_noise(&mut self, factor: f64) {
        for l in &mut self.links {
            l.w *= factor;
            l.psi *= factor;
        }
    }

    pub fn fill_regressor(&self, node: usize, rng: &mut RngStream, out: &mut [f64]) {
        for (u, var) in out.iter_mut().zip(&self.regressor_variances[node]) {
            *u = var.sqrt() * rng.standard_normal();
        }
    }

    /// `u_{k,i} ~ N(0, R_{u,k})`, one independent draw per call.
    pub fn sample_regressor(&self, node: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut u = vec![0.0; self.param_dim];
        self.fill_regressor(node, rng, &mut u);
        u
    }

    /// Draws `v_k(i)` and returns `(d_k(i), v_k(i))` with `d = u·w° + v`.
    pub fn sample_measurement_with_noise(&self, node: usize, regressor: &[f64], rng: &mut RngStream) -> (f64, f64) {
        let noise = self.meas_noise_vars[node].sqrt() * rng.standard_normal();
        (dot(regressor, &self.true_param) + noise, noise)
    }

    pub fn sample_measurement(&self, node: usize, regressor: &[f64], rng: &mut RngStream) -> f64 {
        self.sample_measurement_with_noise(node, regressor, rng).0
    }

    /// Fills `out` with `M` i.i.d. `N(0, σ²)` entries for the link with index `link`.
    pub fn fill_link_noise(&self, link: usize, kind: LinkKind, rng: &mut RngStream, out: &mut [f64]) {
        let sd = self.link_variance(link, kind).sqrt();
        for v in out.iter_mut() {
            *v = sd * rng.standard_normal();
        }
    }

    /// Noise added to what `to` receives from `from`. Self-pairs and non-edges
    /// carry no link and are rejected.
    pub fn sample_link_noise(
        &self,
        topology: &NetworkTopology,
        from: usize,
        to: usize,
        kind: LinkKind,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>, DataError> {
        let link = topology.link_index(from, to).ok_or(DataError::NotALink { from, to })?;
        let mut v = vec![0.0; self.param_dim];
        self.fill_link_noise(link, kind, rng, &mut v);
        Ok(v)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::generate_topology;

    fn autocorr(xs: &[f64], lag: usize) -> f64 {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        let cov: f64 = (0..n - lag).map(|i| (xs[i] - mean) * (xs[i + lag] - mean)).sum();
        cov / var
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    }

    fn pair_env(r: Vec<f64>, sigma_v: f64, w: Vec<f64>) -> (NetworkTopology, Environment) {
        let t = NetworkTopology::complete(2);
        let env =
            Environment::from_parts(&t, w, vec![r.clone(), r], vec![sigma_v, sigma_v], &[(1, 0, 0.01, 0.02)]).unwrap();
        (t, env)
    }

    #[test]
    fn gap_35_db() {
        let t = generate_topology(10, 2.0, 42).unwrap();
        let env = generate_environment(&t, &EnvironmentSpec::new(8, 35.0, 3)).unwrap();
        for kind in [LinkKind::W, LinkKind::Psi] {
            let ratio = env.average_link_power(kind) / env.average_model_noise_power();
            let expected = 10f64.powf(-3.5);
            assert!(((ratio - expected) / expected).abs() < 1e-9, "{ratio}");
        }
        let norm: f64 = env.true_param.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        for (k, r) in env.regressor_variances.iter().enumerate() {
            let tr: f64 = r.iter().sum();
            assert!((4.0..=16.0).contains(&tr), "node {k} trace {tr}");
        }
    }

    #[test]
    fn ideal_links_and_determinism() {
        let t = generate_topology(6, 2.0, 1).unwrap();
        let env = generate_environment(&t, &EnvironmentSpec::new(4, f64::INFINITY, 3)).unwrap();
        assert!(env.links.iter().all(|l| l.w == 0.0 && l.psi == 0.0));
        assert_eq!(env.links.len(), t.num_links());

        let spec = EnvironmentSpec::new(4, 20.0, 11);
        assert_eq!(generate_environment(&t, &spec).unwrap(), generate_environment(&t, &spec).unwrap());
    }

    #[test]
    fn rejects_bad_specs() {
        let t = NetworkTopology::complete(3);
        assert_eq!(generate_environment(&t, &EnvironmentSpec::new(0, 10.0, 1)), Err(DataError::ZeroDimension));
        assert_eq!(generate_environment(&t, &EnvironmentSpec::new(2, -1.0, 1)), Err(DataError::InvalidGap(-1.0)));
    }

    #[test]
    fn tiny_regressor_scale() {
        let (_, env) = pair_env(vec![1e-20, 1e-20], 0.01, vec![1.0, 0.0]);
        let mut rng = RngStream::new(5, StreamPurpose::Regressor, 0);
        for _ in 0..1000 {
            assert!(env.sample_regressor(0, &mut rng).iter().all(|u| u.abs() < 1e-9));
        }
    }

    #[test]
    fn regressor_moments_and_whiteness() {
        let (_, env) = pair_env(vec![4.0, 1.0], 0.01, vec![1.0, 0.0]);
        let mut rng = RngStream::new(5, StreamPurpose::Regressor, 0);
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| env.sample_regressor(0, &mut rng)).collect();
        for (j, expected) in [4.0, 1.0].into_iter().enumerate() {
            let col: Vec<f64> = draws.iter().map(|u| u[j]).collect();
            let v = variance(&col);
            assert!((v - expected).abs() / expected < 0.05, "entry {j}: {v}");
            for lag in 1..=5 {
                assert!(autocorr(&col, lag).abs() < 0.02);
            }
        }
    }

    #[test]
    fn measurements() {
        let (_, env) = pair_env(vec![1.0, 1.0], 0.0, vec![1.0, 0.0]);
        let mut rng = RngStream::new(5, StreamPurpose::MeasurementNoise, 0);
        assert_eq!(env.sample_measurement(0, &[3.0, 0.0], &mut rng), 3.0);
        let u = [0.7, -1.3];
        assert_eq!(env.sample_measurement(1, &u, &mut rng), 0.7);

        let (_, env) = pair_env(vec![1.0, 1.0], 0.05, vec![1.0, 0.0]);
        let d: Vec<f64> = (0..100_000).map(|_| env.sample_measurement(0, &[0.0, 0.0], &mut rng)).collect();
        assert!((variance(&d) - 0.05).abs() / 0.05 < 0.05);
        for lag in 1..=5 {
            assert!(autocorr(&d, lag).abs() < 0.02);
        }
    }

    #[test]
    fn link_noise() {
        let t = generate_topology(4, 2.0, 3).unwrap();
        let mut env = Environment::from_parts(
            &t,
            vec![0.0; 8],
            vec![vec![1.0; 8]; 4],
            vec![0.01; 4],
            &[],
        )
        .unwrap();
        let (from, to) = t.links().next().unwrap();
        let mut rng = RngStream::new(9, StreamPurpose::LinkNoiseFirst, 0);
        assert!(env.sample_link_noise(&t, from, to, LinkKind::W, &mut rng).unwrap().iter().all(|&v| v == 0.0));

        env.links[0].w = 0.01;
        let samples: Vec<Vec<f64>> =
            (0..100_000).map(|_| env.sample_link_noise(&t, from, to, LinkKind::W, &mut rng).unwrap()).collect();
        for j in 0..8 {
            let col: Vec<f64> = samples.iter().map(|v| v[j]).collect();
            assert!((variance(&col) - 0.01).abs() / 0.01 < 0.05);
            for lag in 1..=5 {
                assert!(autocorr(&col, lag).abs() < 0.02);
            }
        }

        let again = |seed| {
            let mut r = RngStream::new(seed, StreamPurpose::LinkNoiseFirst, 4);
            env.sample_link_noise(&t, from, to, LinkKind::W, &mut r).unwrap()
        };
        assert_eq!(again(1), again(1));

        assert_eq!(
            env.sample_link_noise(&t, to, to, LinkKind::Psi, &mut rng),
            Err(DataError::NotALink { from: to, to })
        );
    }

    #[test]
    fn streams_are_independent() {
        let (t, env) = pair_env(vec![1.0, 1.0], 0.05, vec![0.0, 0.0]);
        let mut ru = RngStream::new(1, StreamPurpose::Regressor, 0);
        let mut rv = RngStream::new(1, StreamPurpose::MeasurementNoise, 0);
        let mut rw = RngStream::new(1, StreamPurpose::LinkNoiseFirst, 0);
        let mut rp = RngStream::new(1, StreamPurpose::LinkNoiseSecond, 0);
        let n = 100_000;
        let mut series: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 5];
        for _ in 0..n {
            let u = env.sample_regressor(0, &mut ru);
            series[0].push(u[0]);
            series[1].push(u[1]);
            series[2].push(env.sample_measurement(0, &[0.0, 0.0], &mut rv));
            series[3].push(env.sample_link_noise(&t, 1, 0, LinkKind::W, &mut rw).unwrap()[0]);
            series[4].push(env.sample_link_noise(&t, 1, 0, LinkKind::Psi, &mut rp).unwrap()[0]);
        }
        for a in 0..series.len() {
            for b in (a + 1)..series.len() {
                let c = corr(&series[a], &series[b]);
                assert!(c.abs() < 0.02, "streams {a},{b}: {c}");
            }
        }
        // Same label on a different trial index is a different sequence.
        let mut x = RngStream::new(1, StreamPurpose::Regressor, 1);
        assert_ne!(x.next_u64(), RngStream::new(1, StreamPurpose::Regressor, 0).next_u64());
    }
}
