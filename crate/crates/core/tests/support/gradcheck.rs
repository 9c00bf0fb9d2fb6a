//! Central finite-difference checks of every layer's backward pass and of
//! the composed network + detection loss, in f64.

use gridspot::dataset::Annotation;
use gridspot::geometry::CenterBox;
use gridspot::network::loss::{detection_loss_with_objectness, objectness_targets};
use gridspot::network::{
    assign_targets, BatchNorm, Conv2d, LayerSpec, LeakyRelu, LossConfig, MaxPool, Mode, Network, NetworkConfig,
    PredictionVolume, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel < TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|)`, with the denominator floored at 1e-8 so that
/// entries that are zero both ways count as exact.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

type Blocks<L> = for<'a> fn(&'a mut L) -> Vec<&'a mut Vec<f64>>;

/// Checks a single layer against the scalar objective `sum(r * layer(x))`
/// for a fixed random projection `r`.
fn check_layer<L: Clone>(
    name: &str,
    layer: L,
    x: Tensor<f64>,
    forward: fn(&mut L, Tensor<f64>) -> Tensor<f64>,
    backward: fn(&mut L, &Tensor<f64>) -> Tensor<f64>,
    params: Blocks<L>,
    grads: fn(&L) -> Vec<Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> GradReport {
    let mut probe = layer.clone();
    let y = forward(&mut probe, x.clone());
    let r = random_tensor(rng, y.n, y.c, y.h, y.w);
    let dx = backward(&mut probe, &r);
    let analytic_params = grads(&probe);

    let objective = |l: &L, x: &Tensor<f64>| {
        let mut l = l.clone();
        dot(&forward(&mut l, x.clone()), &r)
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += STEP;
        let mut xm = x.clone();
        xm.data[i] -= STEP;
        let numeric = (objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * STEP);
        worst = worst.max(rel_err(dx.data[i], numeric));
        checked += 1;
    }
    let block_count = analytic_params.len();
    for b in 0..block_count {
        for i in 0..analytic_params[b].len() {
            let mut lp = layer.clone();
            params(&mut lp)[b][i] += STEP;
            let mut lm = layer.clone();
            params(&mut lm)[b][i] -= STEP;
            let numeric = (objective(&lp, &x) - objective(&lm, &x)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic_params[b][i], numeric));
            checked += 1;
        }
    }
    GradReport { name: name.to_string(), checked, max_rel: worst }
}

fn conv_blocks(c: &mut Conv2d<f64>) -> Vec<&mut Vec<f64>> {
    let mut v = vec![&mut c.weight];
    if let Some(b) = &mut c.bias {
        v.push(b);
    }
    v
}

fn conv_grads(c: &Conv2d<f64>) -> Vec<Vec<f64>> {
    let mut v = vec![c.grad_weight.clone()];
    if let Some(b) = &c.grad_bias {
        v.push(b.clone());
    }
    v
}

fn conv_case(name: &str, conv: Conv2d<f64>, x: Tensor<f64>, rng: &mut ChaCha8Rng) -> GradReport {
    check_layer(
        name,
        conv,
        x,
        |c, x| c.forward_train(x).unwrap(),
        |c, dy| c.backward(dy).unwrap().unwrap(),
        conv_blocks,
        conv_grads,
        rng,
    )
}

pub fn layer_reports() -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    let conv = Conv2d::<f64>::new(3, 4, 3, 1, 1, false, &mut rng);
    let x = random_tensor(&mut rng, 2, 3, 7, 7);
    out.push(conv_case("conv 3x3 stride 1", conv, x, &mut rng));

    let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true, &mut rng);
    let x = random_tensor(&mut rng, 2, 2, 8, 8);
    out.push(conv_case("conv 3x3 stride 2 with bias", conv, x, &mut rng));

    let mut conv = Conv2d::<f64>::new(4, 6, 1, 1, 0, true, &mut rng);
    conv.bias.as_mut().unwrap().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let x = random_tensor(&mut rng, 2, 4, 3, 3);
    out.push(conv_case("conv 1x1 head", conv, x, &mut rng));

    let mut bn = BatchNorm::<f64>::new(4);
    bn.gamma.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
    bn.beta.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let x = random_tensor(&mut rng, 2, 4, 5, 5);
    out.push(check_layer(
        "batch norm (train mode)",
        bn,
        x,
        |b, x| b.forward_train(x).unwrap(),
        |b, dy| b.backward(dy).unwrap(),
        |b| vec![&mut b.gamma, &mut b.beta],
        |b| vec![b.grad_gamma.clone(), b.grad_beta.clone()],
        &mut rng,
    ));

    let x = random_tensor(&mut rng, 2, 3, 5, 5);
    out.push(check_layer(
        "leaky relu",
        LeakyRelu::new(0.1),
        x,
        |l, x| l.forward_train(x),
        |l, dy| l.backward(dy.clone()).unwrap(),
        |_| Vec::new(),
        |_| Vec::new(),
        &mut rng,
    ));

    let x = random_tensor(&mut rng, 2, 3, 6, 6);
    out.push(check_layer(
        "max pool 2x2",
        MaxPool::new(2, 2),
        x,
        |p, x| p.forward_train(x).unwrap(),
        |p, dy| p.backward(dy).unwrap(),
        |_| Vec::new(),
        |_| Vec::new(),
        &mut rng,
    ));
    out
}

/// Two conv blocks and the head over a 32x32 input, scored by the
/// detection loss with the objectness targets held fixed.
pub fn two_layer_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        anchors: vec![(0.1, 0.1), (0.2, 0.15), (0.3, 0.3), (0.5, 0.4), (0.8, 0.8)],
        class_names: vec!["aircraft".into()],
        layers: vec![
            LayerSpec::Conv { filters: 4, size: 3, stride: 1, pad: 1 },
            LayerSpec::BatchNorm,
            LayerSpec::Leaky { slope: 0.1 },
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Conv { filters: 4, size: 3, stride: 1, pad: 1 },
            LayerSpec::BatchNorm,
            LayerSpec::Leaky { slope: 0.1 },
            LayerSpec::MaxPool { size: 8, stride: 8 },
            LayerSpec::Head,
        ],
    }
}

pub fn network_report() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut net = Network::<f64>::new(two_layer_config(), 5).unwrap();
    net.set_input_gradient(true);
    let x = Tensor::from_vec(2, 3, 32, 32, (0..2 * 3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect());
    let cfg = net.config().clone();
    let images = [
        vec![
            Annotation { class_id: 0, bbox: CenterBox::new(0.3, 0.2, 0.12, 0.1).unwrap() },
            Annotation { class_id: 0, bbox: CenterBox::new(0.7, 0.8, 0.3, 0.25).unwrap() },
        ],
        vec![Annotation { class_id: 0, bbox: CenterBox::new(0.55, 0.4, 0.2, 0.2).unwrap() }],
    ];
    let targets: Vec<_> =
        images.iter().map(|a| assign_targets(a, &cfg.anchors, 1, net.grid_size()).unwrap()).collect();
    let loss_cfg = LossConfig::default();

    // freeze the IoU objectness targets at the unperturbed prediction
    let out = net.forward(&x, Mode::Train).unwrap();
    let preds = PredictionVolume::from_head_output(&out, 5, 1, 32).unwrap();
    let frozen: Vec<Vec<f64>> = preds.iter().zip(&targets).map(|(p, t)| objectness_targets(p, t, &loss_cfg)).collect();

    let total = |net: &Network<f64>, x: &Tensor<f64>| -> f64 {
        let mut n = net.clone();
        let out = n.forward(x, Mode::Train).unwrap();
        let preds = PredictionVolume::from_head_output(&out, 5, 1, 32).unwrap();
        preds
            .iter()
            .zip(&targets)
            .zip(&frozen)
            .map(|((p, t), o)| detection_loss_with_objectness(p, t, o, &loss_cfg).unwrap().loss)
            .sum()
    };

    let grads: Vec<PredictionVolume> = preds
        .iter()
        .zip(&targets)
        .zip(&frozen)
        .map(|((p, t), o)| detection_loss_with_objectness(p, t, o, &loss_cfg).unwrap().grad)
        .collect();
    net.zero_grad();
    let dx = net.backward(PredictionVolume::to_head_gradient(&grads, 1.0)).unwrap().unwrap();
    let analytic: Vec<Vec<f64>> = net.params_mut().iter().map(|s| s.grad.to_vec()).collect();

    let base = net.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (b, block) in analytic.iter().enumerate() {
        for (i, &a) in block.iter().enumerate() {
            let mut plus = base.clone();
            plus.params_mut()[b].value[i] += STEP;
            let mut minus = base.clone();
            minus.params_mut()[b].value[i] -= STEP;
            let numeric = (total(&plus, &x) - total(&minus, &x)) / (2.0 * STEP);
            worst = worst.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += STEP;
        let mut xm = x.clone();
        xm.data[i] -= STEP;
        let numeric = (total(&base, &xp) - total(&base, &xm)) / (2.0 * STEP);
        worst = worst.max(rel_err(dx.data[i], numeric));
        checked += 1;
    }
    GradReport { name: "2-layer network + detection loss".into(), checked, max_rel: worst }
}

pub fn all_reports() -> Vec<GradReport> {
    let mut r = layer_reports();
    r.push(network_report());
    r
}
