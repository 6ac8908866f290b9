use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fusion::RawLayerFeature;
use crate::numerics::Array;

/// Squared norm budget of the signal plane. Every row spends exactly this
/// much energy across `u` and `v`, so row normalization rescales all tokens
/// by the same factor and the signal survives it linearly.
const ROW_ENERGY: f64 = 8.0;

/// Half-width of the uniform latent; gives unit variance.
const LATENT_BOUND: f64 = 1.732_050_807_568_877_2; // sqrt(3)

/// A simulated encoder and the per-token task distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub total_depth: usize,
    pub num_tokens: usize,
    pub raw_width: usize,
    pub query_width: usize,
    pub num_tasks: usize,
    /// Planted layer `p(t)` of each task.
    pub planted_layers: Vec<usize>,
    pub attenuation_tau: f64,
    pub noise_sigma: f64,
    /// Std of the Gaussian noise added to the task one-hot in each query.
    pub query_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            total_depth: 24,
            num_tokens: 64,
            raw_width: 24,
            query_width: 32,
            num_tasks: 4,
            planted_layers: vec![13, 16, 19, 22],
            attenuation_tau: 1.0,
            noise_sigma: 0.2,
            query_noise: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.num_tasks > self.query_width {
            return Err(Error::invalid(format!(
                "{} tasks do not fit a query width of {}",
                self.num_tasks, self.query_width
            )));
        }
        if self.planted_layers.len() != self.num_tasks {
            return Err(Error::invalid(format!(
                "{} planted layers for {} tasks",
                self.planted_layers.len(),
                self.num_tasks
            )));
        }
        if let Some(&layer) = self.planted_layers.iter().find(|&&p| p >= self.total_depth) {
            return Err(Error::InvalidLayer {
                layer,
                depth: self.total_depth,
            });
        }
        if self.num_tokens == 0 {
            return Err(Error::invalid("a scene needs at least one token"));
        }
        if self.raw_width < 3 {
            return Err(Error::invalid("raw width must be at least 3"));
        }
        if !(self.attenuation_tau > 0.0 && self.attenuation_tau.is_finite()) {
            return Err(Error::invalid("attenuation tau must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be nonnegative"));
        }
        if !(self.query_noise >= 0.0 && self.query_noise.is_finite()) {
            return Err(Error::invalid("query noise must be nonnegative"));
        }
        Ok(())
    }

    /// Fraction of the latent visible in `layer` for `task`:
    /// `exp(-|layer - p(task)| / tau)`.
    pub fn amplitude(&self, layer: usize, task: usize) -> f64 {
        let d = layer.abs_diff(self.planted_layers[task]) as f64;
        (-d / self.attenuation_tau).exp()
    }
}

/// One generated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    /// Every encoder layer, in depth order.
    pub raw_layers: Vec<RawLayerFeature>,
    pub queries: Array,
    pub task_of_token: Vec<usize>,
    pub targets: Array,
}

impl SyntheticBatch {
    pub fn num_tokens(&self) -> usize {
        self.task_of_token.len()
    }
}

/// Draws sequences from a [`SceneSpec`]. The encoder's signal plane is fixed
/// by the seed; sequence `i` comes from its own random stream, so any
/// sequence can be regenerated independently.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    spec: SceneSpec,
    u: Vec<f64>,
    v: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(x: &mut [f64]) {
    let n = dot(x, x).sqrt();
    x.iter_mut().for_each(|v| *v /= n);
}

/// Removes the components of `x` along each (unit) vector in `basis`.
fn orthogonalize(x: &mut [f64], basis: &[&[f64]]) {
    for b in basis {
        let c = dot(x, b);
        x.iter_mut().zip(b.iter()).for_each(|(v, bv)| *v -= c * bv);
    }
}

impl SceneGenerator {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let w = spec.raw_width;
        let ones = vec![1.0 / (w as f64).sqrt(); w];
        let mut draw = |basis: &[&[f64]]| {
            let mut x: Vec<f64> = (0..w).map(|_| rng.sample(StandardNormal)).collect();
            // Twice for numerical orthogonality.
            orthogonalize(&mut x, basis);
            orthogonalize(&mut x, basis);
            normalize(&mut x);
            x
        };
        let u = draw(&[&ones]);
        let v = draw(&[&ones, &u]);
        Ok(Self { spec, u, v })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Signal direction (unit norm, zero mean).
    pub fn signal_direction(&self) -> &[f64] {
        &self.u
    }

    /// Energy-balancing direction (unit norm, zero mean, orthogonal to `u`).
    pub fn balance_direction(&self) -> &[f64] {
        &self.v
    }

    /// Sequence `index` with tasks drawn uniformly from all tasks.
    pub fn sequence(&self, index: u64) -> SyntheticBatch {
        let tasks: Vec<usize> = (0..self.spec.num_tasks).collect();
        self.sequence_with_tasks(index, &tasks)
            .expect("all task ids are valid")
    }

    /// Sequence `index` with each token's task drawn uniformly from `tasks`.
    pub fn sequence_with_tasks(&self, index: u64, tasks: &[usize]) -> Result<SyntheticBatch> {
        let spec = &self.spec;
        if tasks.is_empty() || tasks.iter().any(|&t| t >= spec.num_tasks) {
            return Err(Error::invalid(format!(
                "task subset {tasks:?} is empty or outside 0..{}",
                spec.num_tasks
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        // Stream 0 holds the signal plane.
        rng.set_stream(index.wrapping_add(1));
        let (l, w, d) = (spec.num_tokens, spec.raw_width, spec.query_width);

        let task_of_token: Vec<usize> = (0..l).map(|_| tasks[rng.gen_range(0..tasks.len())]).collect();
        let targets: Vec<f64> = (0..l)
            .map(|_| rng.gen_range(-LATENT_BOUND..LATENT_BOUND))
            .collect();

        let mut queries = vec![0.0; l * d];
        for (t, row) in queries.chunks_mut(d).enumerate() {
            for q in row.iter_mut() {
                *q = spec.query_noise * rng.sample::<f64, _>(StandardNormal);
            }
            row[task_of_token[t]] += 1.0;
        }

        let raw_layers = (0..spec.total_depth)
            .map(|layer| {
                let mut values = vec![0.0; l * w];
                for (t, row) in values.chunks_mut(w).enumerate() {
                    let a = spec.amplitude(layer, task_of_token[t]);
                    let distractor: f64 = rng.gen_range(-LATENT_BOUND..LATENT_BOUND);
                    let c = a * targets[t] + (1.0 - a * a).max(0.0).sqrt() * distractor;
                    let balance = (ROW_ENERGY - c * c).sqrt();
                    for (j, x) in row.iter_mut().enumerate() {
                        let eps: f64 = rng.sample(StandardNormal);
                        *x = c * self.u[j] + balance * self.v[j] + spec.noise_sigma * eps;
                    }
                }
                RawLayerFeature {
                    layer_index: layer,
                    values: Array::matrix(l, w, values).expect("layer shape"),
                }
            })
            .collect();

        Ok(SyntheticBatch {
            raw_layers,
            queries: Array::matrix(l, d, queries).expect("query shape"),
            task_of_token,
            targets: Array::vector(targets),
        })
    }
}

/// The sequence drawn directly from `spec.seed`.
pub fn generate_batch(spec: &SceneSpec) -> Result<SyntheticBatch> {
    Ok(SceneGenerator::new(spec.clone())?.sequence(0))
}
