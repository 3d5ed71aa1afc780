use grap::loss::{loss_value, LossKind};
use grap::mlp::{Activation, Layer, Mlp};
use grap::oracles::suites::random_model_instance;
use grap::{Batch, CompositeModel, DownstreamGrad, Mat, Rng, UpdateRates};

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-5;

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let diff = (a - b).abs();
    diff <= rel * a.abs().max(b.abs()) || diff <= abs
}

fn head_loss(model: &CompositeModel, batch: &Batch, k: Option<usize>, z: &Mat) -> f64 {
    match k {
        Some(k) => {
            let out = model.heads[k].predict(z).unwrap();
            loss_value(model.loss_kinds[k], &out, &batch.targets[k], None).unwrap()
        }
        None => {
            let out = model.downstream_head.predict(z).unwrap();
            loss_value(model.downstream_loss_kind, &out, &batch.downstream, Some(&batch.labeled_mask)).unwrap()
        }
    }
}

fn fd_embedding(model: &CompositeModel, batch: &Batch, k: Option<usize>, z: &Mat) -> Vec<f64> {
    (0..z.as_slice().len())
        .map(|i| {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.as_mut_slice()[i] += STEP;
            zm.as_mut_slice()[i] -= STEP;
            (head_loss(model, batch, k, &zp) - head_loss(model, batch, k, &zm)) / (2.0 * STEP)
        })
        .collect()
}

fn with_backbone(model: &CompositeModel, theta: &[f64]) -> CompositeModel {
    let mut m = model.clone();
    m.backbone.set_params_flat(theta).unwrap();
    m
}

#[test]
fn embedding_gradients_match_central_differences() {
    let mut rng = Rng::new(3);
    for _ in 0..10 {
        let k = 1 + rng.index(4);
        let d = 2 + rng.index(4);
        let (model, batch) = random_model_instance(&mut rng, k, d).unwrap();
        let eg = model.compute_embedding_grads(&batch, DownstreamGrad::Required).unwrap();
        let z = model.embed(&batch.inputs).unwrap();
        assert_eq!(eg.embedding, z);
        for i in 0..k {
            let fd = fd_embedding(&model, &batch, Some(i), &z);
            for (a, f) in eg.g_tilde.row(i).iter().zip(&fd) {
                assert!(close(*a, *f, REL_TOL, 1e-9), "loss {i}: {a} vs {f}");
            }
            assert_eq!(eg.losses[i], head_loss(&model, &batch, Some(i), &z));
        }
        let fd = fd_embedding(&model, &batch, None, &z);
        for (a, f) in eg.g_tilde_down.as_ref().unwrap().iter().zip(&fd) {
            assert!(close(*a, *f, REL_TOL, 1e-9), "downstream: {a} vs {f}");
        }
    }
}

#[test]
fn parameter_gradients_match_central_differences() {
    let mut rng = Rng::new(4);
    for _ in 0..6 {
        let k = 1 + rng.index(3);
        let (model, batch) = random_model_instance(&mut rng, k, 3).unwrap();
        let pg = model.full_param_grads(&batch).unwrap();
        let theta = model.backbone.params_flat();
        for j in 0..theta.len() {
            let mut t = theta.clone();
            t[j] += STEP;
            let plus = with_backbone(&model, &t);
            t[j] -= 2.0 * STEP;
            let minus = with_backbone(&model, &t);
            let lp = plus.pretraining_losses(&batch).unwrap();
            let lm = minus.pretraining_losses(&batch).unwrap();
            for i in 0..k {
                let fd = (lp[i] - lm[i]) / (2.0 * STEP);
                assert!(close(pg.g[(i, j)], fd, REL_TOL, 1e-9), "g[{i},{j}] {} vs {fd}", pg.g[(i, j)]);
            }
            let fd = (plus.downstream_loss(&batch).unwrap() - minus.downstream_loss(&batch).unwrap()) / (2.0 * STEP);
            assert!(close(pg.g_down[j], fd, REL_TOL, 1e-9), "g_down[{j}] {} vs {fd}", pg.g_down[j]);
        }
    }
}

/// Rows of the `(B*d) x P` backbone Jacobian from unit-cotangent VJPs.
fn backbone_jacobian(model: &CompositeModel, inputs: &Mat) -> Mat {
    let (z, tape) = model.backbone.forward(inputs).unwrap();
    let n = z.as_slice().len();
    let mut jac = Mat::zeros(n, model.backbone.param_count());
    for r in 0..n {
        let mut e = Mat::zeros(z.rows(), z.cols());
        e.as_mut_slice()[r] = 1.0;
        let g = model.backbone.vjp_params(&tape, &e).unwrap().flatten();
        jac.row_mut(r).copy_from_slice(&g);
    }
    jac
}

#[test]
fn parameter_gradients_factor_through_the_embedding() {
    let mut rng = Rng::new(5);
    for _ in 0..10 {
        let k = 1 + rng.index(4);
        let d = 2 + rng.index(3);
        let (model, batch) = random_model_instance(&mut rng, k, d).unwrap();
        let eg = model.compute_embedding_grads(&batch, DownstreamGrad::Required).unwrap();
        let pg = model.param_grads_from(&eg).unwrap();
        let jac = backbone_jacobian(&model, &batch.inputs);
        for i in 0..k {
            let chained = jac.matvec_t(eg.g_tilde.row(i)).unwrap();
            for (a, b) in pg.g.row(i).iter().zip(&chained) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
        let chained = jac.matvec_t(eg.g_tilde_down.as_ref().unwrap()).unwrap();
        for (a, b) in pg.g_down.iter().zip(&chained) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn linear_backbone_jacobian_has_closed_form() {
    let w = Mat::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]]).unwrap();
    let backbone = Mlp::new(vec![Layer::new(w, vec![0.1, -0.2], Activation::Identity).unwrap()]).unwrap();
    let head = |rng: &mut Rng| Mlp::init(&[2, 1], Activation::Identity, Activation::Identity, rng).unwrap();
    let mut rng = Rng::new(0);
    let model = CompositeModel::new(
        backbone,
        vec![head(&mut rng)],
        head(&mut rng),
        vec![LossKind::SquaredError],
        LossKind::SquaredError,
    )
    .unwrap();
    let x = Mat::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]]).unwrap();
    let jac = backbone_jacobian(&model, &x);
    // theta = (W row-major, b); z[i, a] = sum_j W[a, j] x[i, j] + b[a]
    for i in 0..2 {
        for a in 0..2 {
            let r = i * 2 + a;
            for c in 0..2 {
                for j in 0..3 {
                    let expected = if c == a { x[(i, j)] } else { 0.0 };
                    assert_eq!(jac[(r, c * 3 + j)], expected);
                }
                assert_eq!(jac[(r, 6 + c)], if c == a { 1.0 } else { 0.0 });
            }
        }
    }
}

fn bits(m: &Mlp) -> Vec<u64> {
    m.params_flat().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn downstream_labels_never_reach_the_backbone_or_pretraining_heads() {
    let mut rng = Rng::new(6);
    for _ in 0..10 {
        let k = 1 + rng.index(4);
        let (model, batch) = random_model_instance(&mut rng, k, 3).unwrap();
        let mut relabeled = batch.clone();
        for v in relabeled.downstream.as_mut_slice() {
            *v = match model.downstream_loss_kind {
                LossKind::CrossEntropy => 1.0 - *v,
                LossKind::SquaredError => *v + 5.0,
            };
        }
        let w_bar: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
        let rates = UpdateRates::uniform(0.1);
        let mut a = model.clone();
        let mut b = model.clone();
        let ga = a.compute_embedding_grads(&batch, DownstreamGrad::Required).unwrap();
        let gb = b.compute_embedding_grads(&relabeled, DownstreamGrad::Required).unwrap();
        a.apply_composite_update(&ga, &w_bar, rates).unwrap();
        b.apply_composite_update(&gb, &w_bar, rates).unwrap();
        assert_eq!(bits(&a.backbone), bits(&b.backbone));
        for (ha, hb) in a.heads.iter().zip(&b.heads) {
            assert_eq!(bits(ha), bits(hb));
        }
        assert_ne!(bits(&a.downstream_head), bits(&b.downstream_head));
    }
}

#[test]
fn duplicating_the_batch_leaves_mean_gradients_unchanged() {
    let mut rng = Rng::new(7);
    for _ in 0..10 {
        let k = 1 + rng.index(4);
        let (model, batch) = random_model_instance(&mut rng, k, 3).unwrap();
        let idx: Vec<usize> = (0..batch.len()).chain(0..batch.len()).collect();
        let doubled = batch.select(&idx);
        let e1 = model.compute_embedding_grads(&batch, DownstreamGrad::Required).unwrap();
        let e2 = model.compute_embedding_grads(&doubled, DownstreamGrad::Required).unwrap();
        for (a, b) in e1.losses.iter().zip(&e2.losses) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        let p1 = model.param_grads_from(&e1).unwrap();
        let p2 = model.param_grads_from(&e2).unwrap();
        for (a, b) in p1.g.as_slice().iter().zip(p2.g.as_slice()).chain(p1.g_down.iter().zip(&p2.g_down)) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
        for (h1, h2) in e1.head_grads().iter().zip(e2.head_grads()) {
            for (a, b) in h1.flatten().iter().zip(h2.flatten()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}

#[test]
fn zero_weights_freeze_the_backbone_but_not_the_heads() {
    let mut rng = Rng::new(8);
    let (model, batch) = random_model_instance(&mut rng, 3, 3).unwrap();
    let eg = model.compute_embedding_grads(&batch, DownstreamGrad::Required).unwrap();
    let mut m = model.clone();
    m.apply_composite_update(&eg, &[0.0; 3], UpdateRates::uniform(0.1)).unwrap();
    assert_eq!(bits(&m.backbone), bits(&model.backbone));
    for (a, b) in m.heads.iter().zip(&model.heads) {
        assert_ne!(bits(a), bits(b));
    }
}

#[test]
fn a_zero_weight_removes_that_loss_from_the_backbone_update() {
    let mut rng = Rng::new(9);
    let (model, batch) = random_model_instance(&mut rng, 3, 3).unwrap();
    let mut altered = batch.clone();
    altered.targets[1] = match model.loss_kinds[1] {
        LossKind::SquaredError => altered.targets[1].scaled(-3.0),
        LossKind::CrossEntropy => Mat::zeros(batch.len(), 1),
    };
    let w_bar = [0.7, 0.0, 1.3];
    let mut a = model.clone();
    let mut b = model.clone();
    let ga = a.compute_embedding_grads(&batch, DownstreamGrad::Skip).unwrap();
    let gb = b.compute_embedding_grads(&altered, DownstreamGrad::Skip).unwrap();
    a.apply_composite_update(&ga, &w_bar, UpdateRates::uniform(0.1)).unwrap();
    b.apply_composite_update(&gb, &w_bar, UpdateRates::uniform(0.1)).unwrap();
    for (x, y) in a.backbone.params_flat().iter().zip(b.backbone.params_flat()) {
        assert!((x - y).abs() <= 1e-15);
    }
    assert_eq!(bits(&a.heads[0]), bits(&b.heads[0]));
    assert_eq!(bits(&a.heads[2]), bits(&b.heads[2]));
}

#[test]
fn identity_head_gradient_is_the_scaled_residual() {
    let mut rng = Rng::new(10);
    let backbone = Mlp::init(&[4, 6, 3], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
    let identity = Mlp::new(vec![Layer::new(Mat::identity(3), vec![0.0; 3], Activation::Identity).unwrap()]).unwrap();
    let down = Mlp::init(&[3, 1], Activation::Identity, Activation::Identity, &mut rng).unwrap();
    let model = CompositeModel::new(backbone, vec![identity], down, vec![LossKind::SquaredError], LossKind::SquaredError)
        .unwrap();
    let b = 5;
    let inputs = Mat::random_normal(b, 4, 1.0, &mut rng);
    let t = Mat::random_normal(b, 3, 1.0, &mut rng);
    let batch = Batch::new(inputs, vec![t.clone()], Mat::zeros(b, 1), vec![false; b]).unwrap();
    let eg = model.compute_embedding_grads(&batch, DownstreamGrad::IfLabeled).unwrap();
    assert!(eg.g_tilde_down.is_none());
    let z = model.embed(&batch.inputs).unwrap();
    for (i, g) in eg.g_tilde.row(0).iter().enumerate() {
        let expected = (z.as_slice()[i] - t.as_slice()[i]) / b as f64;
        assert!((g - expected).abs() <= 1e-15);
    }
}

#[test]
fn required_downstream_gradient_needs_labels() {
    let mut rng = Rng::new(12);
    let (model, mut batch) = random_model_instance(&mut rng, 2, 3).unwrap();
    batch.labeled_mask.iter_mut().for_each(|m| *m = false);
    assert!(model.compute_embedding_grads(&batch, DownstreamGrad::Required).is_err());
    assert!(model.full_param_grads(&batch).is_err());
}
