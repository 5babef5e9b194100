//! 64-bit central-difference checks of every differentiable operation and of a tiny
//! U-Net end to end.

use rand::Rng;
use serde::Serialize;

use crate::rng::keyed_rng;
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, grad_check, kink_signature,
    maxpool2x2, maxpool2x2_backward, sigmoid, sigmoid_backward, split_channels, GradCheckReport, Probe, Shape, Tensor,
    TensorError,
};
use crate::trainer::dice_loss;
use crate::unet::{Model, UNetConfig};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;
const EPS: f64 = 1e-5;
// The model objective sums many terms, so its rounding noise (~1e-15) swamps a
// 1e-5 step on gradient components near 1e-6.
const MODEL_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckEntry {
    fn new(name: impl Into<String>, r: GradCheckReport, tolerance: f64) -> Self {
        Self { name: name.into(), checked: r.checked, skipped: r.skipped.len(), max_rel_error: r.max_rel_error, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut impl Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Runs every check; deterministic for a given `seed`.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>, TensorError> {
    let mut rng = keyed_rng(&[seed, 0x6AD]);
    let mut out = Vec::new();

    // conv2d: input, weight, bias
    let x = random(&mut rng, Shape::new(2, 2, 5, 4), -1.0, 1.0);
    let w = random(&mut rng, Shape::new(3, 2, 3, 3), -1.0, 1.0);
    let b = random(&mut rng, Shape::new(1, 3, 1, 1), -1.0, 1.0);
    let r = random(&mut rng, Shape::new(2, 3, 5, 4), -1.0, 1.0);
    let g = conv2d_backward(&x, &w, &r)?;
    let obj = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| Probe::smooth(conv2d(x, w, b).expect("conv shapes").dot(&r));
    out.push(GradCheckEntry::new("conv2d/input", grad_check(|t| obj(t, &w, &b), &x, &g.input, EPS)?, OP_TOLERANCE));
    out.push(GradCheckEntry::new("conv2d/weight", grad_check(|t| obj(&x, t, &b), &w, &g.weight, EPS)?, OP_TOLERANCE));
    out.push(GradCheckEntry::new("conv2d/bias", grad_check(|t| obj(&x, &w, t), &b, &g.bias, EPS)?, OP_TOLERANCE));

    // conv_transpose2d
    let x = random(&mut rng, Shape::new(2, 3, 3, 2), -1.0, 1.0);
    let w = random(&mut rng, Shape::new(3, 2, 2, 2), -1.0, 1.0);
    let b = random(&mut rng, Shape::new(1, 2, 1, 1), -1.0, 1.0);
    let r = random(&mut rng, Shape::new(2, 2, 6, 4), -1.0, 1.0);
    let g = conv_transpose2d_backward(&x, &w, &r)?;
    let obj = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        Probe::smooth(conv_transpose2d(x, w, b).expect("upconv shapes").dot(&r))
    };
    out.push(GradCheckEntry::new("conv_transpose2d/input", grad_check(|t| obj(t, &w, &b), &x, &g.input, EPS)?, OP_TOLERANCE));
    out.push(GradCheckEntry::new("conv_transpose2d/weight", grad_check(|t| obj(&x, t, &b), &w, &g.weight, EPS)?, OP_TOLERANCE));
    out.push(GradCheckEntry::new("conv_transpose2d/bias", grad_check(|t| obj(&x, &w, t), &b, &g.bias, EPS)?, OP_TOLERANCE));

    // maxpool: continuous random values make ties improbable; straddling probes are skipped
    let x = random(&mut rng, Shape::new(2, 2, 4, 6), -1.0, 1.0);
    let r = random(&mut rng, Shape::new(2, 2, 2, 3), -1.0, 1.0);
    let (_, idx) = maxpool2x2(&x)?;
    let g = maxpool2x2_backward(&r, &idx)?;
    let f = |t: &Tensor<f64>| {
        let (y, i) = maxpool2x2(t).expect("even input");
        Probe { value: y.dot(&r), kinks: kink_signature::<f64>(&[], &[&i]) }
    };
    out.push(GradCheckEntry::new("maxpool2x2", grad_check(f, &x, &g, EPS)?, OP_TOLERANCE));

    // sigmoid
    let x = random(&mut rng, Shape::new(1, 2, 3, 3), -4.0, 4.0);
    let r = random(&mut rng, x.shape(), -1.0, 1.0);
    let g = sigmoid_backward(&sigmoid(&x), &r)?;
    out.push(GradCheckEntry::new("sigmoid", grad_check(|t| Probe::smooth(sigmoid(t).dot(&r)), &x, &g, EPS)?, OP_TOLERANCE));

    // concat (skip first)
    let a = random(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
    let c = random(&mut rng, Shape::new(2, 3, 3, 3), -1.0, 1.0);
    let r = random(&mut rng, Shape::new(2, 5, 3, 3), -1.0, 1.0);
    let (ga, gc) = split_channels(&r, 2)?;
    let obj = |a: &Tensor<f64>, c: &Tensor<f64>| Probe::smooth(concat_channels(a, c).expect("same spatial dims").dot(&r));
    out.push(GradCheckEntry::new("concat/first", grad_check(|t| obj(t, &c), &a, &ga, EPS)?, OP_TOLERANCE));
    out.push(GradCheckEntry::new("concat/second", grad_check(|t| obj(&a, t), &c, &gc, EPS)?, OP_TOLERANCE));

    // dice loss on random probabilities
    let p = random(&mut rng, Shape::new(3, 1, 4, 4), 0.05, 0.95);
    let t = Tensor::from_fn(p.shape(), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    let (_, g) = dice_loss(&p, &t, 1.0).map_err(|e| TensorError::GradCheck(e.to_string()))?;
    let f = |q: &Tensor<f64>| Probe::smooth(dice_loss(q, &t, 1.0).expect("valid probabilities").0);
    out.push(GradCheckEntry::new("dice_loss", grad_check(f, &p, &g, EPS)?, OP_TOLERANCE));

    out.extend(unet_checks(seed)?);
    Ok(out)
}

/// Tiny U-Net (levels 2, base 2, 8×8): gradient of a random projection of the output
/// with respect to the input and every parameter tensor.
pub fn unet_checks(seed: u64) -> Result<Vec<GradCheckEntry>, TensorError> {
    let mut rng = keyed_rng(&[seed, 0x0E7]);
    let mut model: Model<f64> = Model::build(UNetConfig::new(2, 2), seed).map_err(|e| TensorError::GradCheck(e.to_string()))?;
    // zero biases put exactly-zero pre-activations on ReLU kinks; check at a generic point
    for p in model.parameters_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        let shape = p.value.shape();
        p.value = random(&mut rng, shape, -0.1, 0.1);
    }
    let x = random(&mut rng, Shape::new(1, 1, 8, 8), 0.0, 1.0);
    let r = random(&mut rng, Shape::new(1, 1, 8, 8), -1.0, 1.0);
    let probe = |m: &Model<f64>, x: &Tensor<f64>| {
        let c = m.forward_train(x).expect("valid input");
        Probe { value: c.probs.dot(&r), kinks: c.kink_signature() }
    };
    let mut analytic = model.clone();
    analytic.zero_grad();
    let cache = analytic.forward_train(&x).map_err(|e| TensorError::GradCheck(e.to_string()))?;
    let gx = analytic.backward(&cache, &r).map_err(|e| TensorError::GradCheck(e.to_string()))?;

    let mut out = vec![GradCheckEntry::new("unet/input", grad_check(|t| probe(&model, t), &x, &gx, MODEL_EPS)?, MODEL_TOLERANCE)];
    for (k, p) in analytic.parameters().iter().enumerate() {
        let mut m = model.clone();
        let report = grad_check(
            |t| {
                m.parameters_mut()[k].value = t.clone();
                probe(&m, &x)
            },
            &p.value,
            &p.grad,
            MODEL_EPS,
        )?;
        out.push(GradCheckEntry::new(format!("unet/{}", p.name), report, MODEL_TOLERANCE));
    }
    Ok(out)
}
