use rand::Rng;

/// A named parameter tensor with its gradient accumulator.
///
/// Non-trainable entries (batch-norm running statistics) ride along so that
/// checkpoints capture them, but optimizers skip them.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Vec<f32>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform(len: usize, bound: f32, rng: &mut impl Rng) -> Self {
        Self::new((0..len).map(|_| rng.gen_range(-bound..=bound)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad
            .iter()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Anything that owns parameters. Visitation order is stable and defines
/// both checkpoint layout and optimizer-state indexing.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Number of trainable scalars.
    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    /// L2 norm over all trainable parameters.
    fn param_norm(&self) -> f64 {
        let mut s = 0.0f64;
        self.visit("", &mut |_, p| {
            if p.trainable {
                s += p.value.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        });
        s.sqrt()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
