use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcalc::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Channel counts of the four encoder layers, starting from RGB.
pub const ENCODER_CHANNELS: [usize; 5] = [3, 16, 16, 32, 32];
pub const ENCODER_STRIDES: [usize; 4] = [1, 2, 2, 1];
/// Spatial downsampling of the feature grid relative to the image.
pub const FEATURE_STRIDE: usize = 4;
pub const FEATURE_DIM: usize = 32;
pub const HIDDEN: usize = 64;

/// Parameter group, used for reporting and per-group gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Occupancy,
    Texture,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("enc") => Self::Encoder,
            Some("occ") => Self::Occupancy,
            _ => Self::Texture,
        }
    }
}

/// Every learnable tensor of the encoder and both heads, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    entries: Vec<(String, Tensor)>,
}

/// Expected `(name, shape, fan_in)` for each parameter.
pub fn architecture() -> Vec<(String, Vec<usize>, usize)> {
    let mut layout = Vec::new();
    for l in 0..4 {
        let (cin, cout) = (ENCODER_CHANNELS[l], ENCODER_CHANNELS[l + 1]);
        layout.push((format!("enc.{l}.weight"), vec![cout, cin, 3, 3], cin * 9));
        layout.push((format!("enc.{l}.bias"), vec![cout], cin * 9));
    }
    for (head, out) in [("occ", 1), ("tex", 3)] {
        let dims = [FEATURE_DIM + 1, HIDDEN, HIDDEN, out];
        for l in 0..3 {
            layout.push((format!("{head}.{l}.weight"), vec![dims[l], dims[l + 1]], dims[l]));
            layout.push((format!("{head}.{l}.bias"), vec![dims[l + 1]], dims[l]));
        }
    }
    layout
}

impl FieldParams {
    /// Uniform(-s, s) initialization with `s = 1/sqrt(fan_in)`.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = architecture()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let s = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
                (name, Tensor::new(shape, data).expect("architecture shapes are nonzero"))
            })
            .collect();
        Self { entries }
    }

    /// Builds parameters from named tensors, checking them against the architecture.
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let arch = architecture();
        if entries.len() != arch.len() {
            return Err(Error::contract(
                "field params",
                format!("expected {} tensors, got {}", arch.len(), entries.len()),
            ));
        }
        for ((name, t), (want, shape, _)) in entries.iter().zip(&arch) {
            if name != want || t.shape() != shape.as_slice() {
                return Err(Error::contract(
                    "field params",
                    format!("expected {want} {shape:?}, got {name} {:?}", t.shape()),
                ));
            }
            if !t.all_finite() {
                return Err(Error::contract("field params", format!("{name} has non-finite values")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Registers every tensor as a gradient-tracking leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        self.bind_with(graph, true)
    }

    /// Registers every tensor as a constant.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph, requires_grad: bool) -> BoundParams<'g> {
        BoundParams { vars: self.entries.iter().map(|(_, t)| graph.leaf(t.clone(), requires_grad)).collect() }
    }
}

/// Field parameters registered on a graph, in [`FieldParams`] order.
#[derive(Clone, Debug)]
pub struct BoundParams<'g> {
    pub vars: Vec<Var<'g>>,
}

impl<'g> BoundParams<'g> {
    pub fn encoder_layer(&self, l: usize) -> (Var<'g>, Var<'g>) {
        (self.vars[2 * l], self.vars[2 * l + 1])
    }

    /// `(weight, bias)` pairs of a head: 0 = occupancy, 1 = texture.
    pub fn head(&self, head: usize) -> [(Var<'g>, Var<'g>); 3] {
        let base = 8 + head * 6;
        [0, 1, 2].map(|l| (self.vars[base + 2 * l], self.vars[base + 2 * l + 1]))
    }

    /// Gradients in parameter order; missing gradients become zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars.iter().map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect()
    }
}
