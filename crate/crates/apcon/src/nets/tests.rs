use std::sync::Arc;

use approx::assert_abs_diff_eq;
use ndarray::Array2;

use super::*;
use crate::params::ParameterVector;

fn mlp_cfg(
    input_dim: usize,
    width: usize,
    hidden_layers: usize,
    output_dim: usize,
    activation: Activation,
    layer_norm: bool,
) -> ModifiedMlpConfig {
    ModifiedMlpConfig {
        input_dim,
        width,
        hidden_layers,
        output_dim,
        activation,
        layer_norm,
    }
}

fn filter_layer(order: PoolOrder, activation: Activation) -> FilterLayerConfig {
    FilterLayerConfig {
        channels: 4,
        kernel: (2, 2),
        stride: (2, 2),
        pool: (2, 2),
        pool_stride: (2, 2),
        order,
        activation,
    }
}

/// Branch over (32, 64) samples with two conv+pool stages, as trained.
fn standard_conv_branch(order: PoolOrder) -> ConvBranchConfig {
    ConvBranchConfig {
        input_shape: (32, 64),
        filter_layers: vec![filter_layer(order, Activation::Gelu); 2],
        lift_width: 64,
        mlp: mlp_cfg(64, 64, 5, 64, Activation::Swish, true),
    }
}

fn seg_by_name<'a>(pv: &'a ParameterVector, name: &str) -> (&'a [f64], usize, usize) {
    let idx = pv
        .layout
        .index_of(name)
        .unwrap_or_else(|| panic!("no segment {name}"));
    let s = pv.layout.segment(idx);
    (pv.segment_values(idx), s.rows, s.cols)
}

fn affine_oracle(pv: &ParameterVector, w_name: &str, b_name: &str, x: &[f64]) -> Vec<f64> {
    let (w, rows, cols) = seg_by_name(pv, w_name);
    let (b, _, _) = seg_by_name(pv, b_name);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| b[r] + (0..cols).map(|c| w[r * cols + c] * x[c]).sum::<f64>())
        .collect()
}

fn ln_oracle(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    v.iter()
        .enumerate()
        .map(|(i, x)| (x - m) * inv * gain[i] + bias[i])
        .collect()
}

/// Scalar-loop re-implementation of the gated recursion, built only from the
/// named parameter segments.
fn mlp_oracle(cfg: &ModifiedMlpConfig, pv: &ParameterVector, prefix: &str, x: &[f64]) -> Vec<f64> {
    let act = cfg.activation.unary();
    let apply = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|u| act.f(u)).collect() };
    let u = apply(affine_oracle(
        pv,
        &format!("{prefix}.u.w"),
        &format!("{prefix}.u.b"),
        x,
    ));
    let vv = apply(affine_oracle(
        pv,
        &format!("{prefix}.v.w"),
        &format!("{prefix}.v.b"),
        x,
    ));
    let mut h = apply(affine_oracle(
        pv,
        &format!("{prefix}.h.w"),
        &format!("{prefix}.h.b"),
        x,
    ));
    for l in 1..cfg.hidden_layers {
        let mut pre = affine_oracle(
            pv,
            &format!("{prefix}.z{l}.w"),
            &format!("{prefix}.z{l}.b"),
            &h,
        );
        if cfg.layer_norm {
            let (g, _, _) = seg_by_name(pv, &format!("{prefix}.z{l}.ln_g"));
            let (b, _, _) = seg_by_name(pv, &format!("{prefix}.z{l}.ln_b"));
            pre = ln_oracle(&pre, g, b, LAYER_NORM_EPS);
        }
        let z = apply(pre);
        h = (0..h.len())
            .map(|i| (1.0 - z[i]) * u[i] + z[i] * vv[i])
            .collect();
    }
    affine_oracle(
        pv,
        &format!("{prefix}.out.w"),
        &format!("{prefix}.out.b"),
        &h,
    )
}

#[test]
fn gated_recursion_matches_scalar_oracle() {
    for (act, ln) in [
        (Activation::Swish, false),
        (Activation::Gelu, false),
        (Activation::Swish, true),
        (Activation::Tanh, true),
    ] {
        let cfg = mlp_cfg(3, 8, 3, 5, act, ln);
        let mut layout = ParameterLayout::new();
        let segs = register_mlp(&mut layout, "net", &cfg);
        let mut pv = ParameterVector::init(Arc::new(layout), 0);
        if ln {
            // Non-default affine terms so the normalization path is exercised.
            for l in 1..cfg.hidden_layers {
                let gi = pv.layout.index_of(&format!("net.z{l}.ln_g")).unwrap();
                let bi = pv.layout.index_of(&format!("net.z{l}.ln_b")).unwrap();
                let (o, len) = {
                    let s = pv.layout.segment(gi);
                    (s.offset, s.len())
                };
                pv.values[o..o + len].fill(1.3);
                let (o, len) = {
                    let s = pv.layout.segment(bi);
                    (s.offset, s.len())
                };
                pv.values[o..o + len].fill(-0.2);
            }
        }
        let x = [0.1, 0.2, 0.3];
        let got = modified_mlp_forward(&cfg, &pv, &segs, &x).unwrap();
        let want = mlp_oracle(&cfg, &pv, "net", &x);
        assert_eq!(got.len(), 5);
        for (g, w) in got.iter().zip(&want) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    let cfg = mlp_cfg(3, 6, 2, 4, Activation::Tanh, false);
    let mut layout = ParameterLayout::new();
    let segs = register_mlp(&mut layout, "z", &cfg);
    let mut pv = ParameterVector::init(Arc::new(layout), 1);
    pv.values.fill(0.0);
    let out = modified_mlp_forward(&cfg, &pv, &segs, &[0.4, -0.2, 0.9]).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_reference_cases() {
    // Constant vector: zero variance, so only the bias survives.
    let out = layer_norm(&[1.0; 4], &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS);
    assert!(out.iter().all(|&v| v == 0.0));
    let out = layer_norm(&[1.0; 4], &[1.0; 4], &[0.7; 4], LAYER_NORM_EPS);
    assert!(out.iter().all(|&v| v == 0.7));

    // Unit-variance pair with eps = 0 reproduces itself.
    let out = layer_norm(&[-1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0);
    assert_abs_diff_eq!(out[0], -1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(out[1], 1.0, epsilon = 1e-15);

    // Hand-rolled mean/variance check.
    let v = [0.0, 2.0, 4.0];
    let out = layer_norm(&v, &[2.0; 3], &[1.0; 3], LAYER_NORM_EPS);
    let mean = 2.0;
    let var = 8.0 / 3.0;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..3 {
        assert_abs_diff_eq!(out[i], (v[i] - mean) * inv * 2.0 + 1.0, epsilon = 1e-15);
    }
}

#[test]
fn standard_branch_flattens_to_eight() {
    let cfg = standard_conv_branch(PoolOrder::PoolThenActivation);
    assert_eq!(cfg.flatten_len().unwrap(), 8);
}

#[test]
fn channel_count_does_not_change_flatten_length() {
    let mut cfg = standard_conv_branch(PoolOrder::PoolThenActivation);
    for fl in &mut cfg.filter_layers {
        fl.channels *= 2;
    }
    assert_eq!(cfg.flatten_len().unwrap(), 8);
}

#[test]
fn widening_input_touches_only_the_lift_segment() {
    let narrow = standard_conv_branch(PoolOrder::PoolThenActivation);
    let mut wide = narrow.clone();
    wide.input_shape = (32, 128);

    let mut l1 = ParameterLayout::new();
    register_conv_branch(&mut l1, "b", &narrow).unwrap();
    let mut l2 = ParameterLayout::new();
    register_conv_branch(&mut l2, "b", &wide).unwrap();

    assert_eq!(l1.segments().len(), l2.segments().len());
    for (a, b) in l1.segments().iter().zip(l2.segments()) {
        assert_eq!(a.name, b.name);
        if a.name == "b.lift.w" {
            assert_eq!((a.rows, a.cols), (64, 8));
            assert_eq!((b.rows, b.cols), (64, 16));
        } else {
            assert_eq!((a.rows, a.cols), (b.rows, b.cols), "segment {}", a.name);
        }
    }
}

#[test]
fn pool_and_activation_commute_when_linear() {
    let before = {
        let mut c = standard_conv_branch(PoolOrder::PoolThenActivation);
        for fl in &mut c.filter_layers {
            fl.activation = Activation::Identity;
        }
        c
    };
    let after = {
        let mut c = before.clone();
        for fl in &mut c.filter_layers {
            fl.order = PoolOrder::ActivationThenPool;
        }
        c
    };
    // The layout is order-independent, so one parameter vector serves both.
    let mut layout = ParameterLayout::new();
    let segs = register_conv_branch(&mut layout, "b", &before).unwrap();
    let pv = ParameterVector::init(Arc::new(layout), 5);
    let a = Array2::from_shape_fn((32, 64), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
    let y1 = conv_branch_forward(&before, &pv, &segs, &a).unwrap();
    let y2 = conv_branch_forward(&after, &pv, &segs, &a).unwrap();
    for (p, q) in y1.iter().zip(&y2) {
        assert_eq!(p.to_bits(), q.to_bits());
    }
}

#[test]
fn zero_image_reduces_to_the_lift_bias_path() {
    let cfg = standard_conv_branch(PoolOrder::PoolThenActivation);
    let mut layout = ParameterLayout::new();
    let segs = register_conv_branch(&mut layout, "b", &cfg).unwrap();
    let pv = ParameterVector::init(Arc::new(layout), 9);
    // Zero image, zero conv/lift biases: the MLP sees gelu(0) = 0.
    let a = Array2::zeros((32, 64));
    let via_branch = conv_branch_forward(&cfg, &pv, &segs, &a).unwrap();
    let direct = modified_mlp_forward(&cfg.mlp, &pv, &segs.mlp, &[0.0; 64]).unwrap();
    for (p, q) in via_branch.iter().zip(&direct) {
        assert_eq!(p.to_bits(), q.to_bits());
    }
}

#[test]
fn combiner_reference_cases() {
    let mut e1 = vec![0.0; 4];
    e1[0] = 1.0;
    assert_abs_diff_eq!(deeponet_combine(&e1, &e1, 0.0), 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(
        deeponet_combine(&[0.0; 4], &[3.0; 4], 2.5),
        2.5,
        epsilon = 1e-15
    );
    let b = [0.3, -1.2, 0.8, 2.0];
    let t = [1.1, 0.4, -0.6, 0.5];
    let dot: f64 = b.iter().zip(&t).map(|(x, y)| x * y).sum();
    assert_abs_diff_eq!(deeponet_combine(&b, &t, 0.7), dot + 0.7, epsilon = 1e-15);

    // Linear in the trunk coefficients for a fixed branch.
    let t2 = [0.2, 0.9, 1.5, -0.3];
    let sum: Vec<f64> = t.iter().zip(&t2).map(|(a, b)| a + b).collect();
    assert_abs_diff_eq!(
        deeponet_combine(&b, &sum, 0.7),
        deeponet_combine(&b, &t, 0.7) + deeponet_combine(&b, &t2, 0.0),
        epsilon = 1e-14
    );
}

#[test]
fn operator_eval_reuses_one_branch_pass() {
    let cfg = DeepOnetConfig {
        branch: BranchConfig::Dense(mlp_cfg(12, 10, 2, 6, Activation::Swish, false)),
        trunk: mlp_cfg(3, 10, 2, 6, Activation::Swish, false),
        p: 6,
    };
    let mut layout = ParameterLayout::new();
    let segs = register_deeponet(&mut layout, "g", &cfg).unwrap();
    let pv = ParameterVector::init(Arc::new(layout), 4);
    let a: Vec<f64> = (0..12).map(|i| (i as f64) / 12.0 - 0.5).collect();
    let ys = Array2::from_shape_vec(
        (3, 3),
        vec![0.1, 0.2, 0.3, 0.5, 0.6, 0.7, 0.9, 1.0, 1.1],
    )
    .unwrap();
    let many = deeponet_eval_many(&cfg, &pv, &segs, &a, &ys).unwrap();
    for j in 0..3 {
        let y: Vec<f64> = ys.column(j).to_vec();
        let single = deeponet_eval(&cfg, &pv, &segs, &a, &y).unwrap();
        assert_abs_diff_eq!(many[j], single, epsilon = 1e-12);
    }
}

#[test]
fn parameter_counts_are_frozen() {
    // Dense-branch transport net: flattened (32,64) sample in, (t,x,v) trunk.
    let dense = DeepOnetConfig {
        branch: BranchConfig::Dense(mlp_cfg(2048, 64, 5, 64, Activation::Swish, false)),
        trunk: mlp_cfg(3, 64, 4, 64, Activation::Swish, false),
        p: 64,
    };
    let mut layout = ParameterLayout::new();
    register_deeponet(&mut layout, "f", &dense).unwrap();
    let dense_count = ParameterVector::init(Arc::new(layout), 0).param_count();
    assert_eq!(dense_count, 431_617);

    // Convolutional counterpart with layer norm.
    let conv = DeepOnetConfig {
        branch: BranchConfig::Conv(standard_conv_branch(PoolOrder::PoolThenActivation)),
        trunk: mlp_cfg(3, 64, 4, 64, Activation::Swish, true),
        p: 64,
    };
    let mut layout = ParameterLayout::new();
    register_deeponet(&mut layout, "f", &conv).unwrap();
    let conv_count = ParameterVector::init(Arc::new(layout), 0).param_count();
    assert_eq!(conv_count, 52_249);

    let ratio = conv_count as f64 / dense_count as f64;
    assert!((0.08..=0.13).contains(&ratio), "ratio {ratio}");
    // Close to the published accounting despite different layer bookkeeping.
    let published = 43_288.0;
    assert!((conv_count as f64 - published).abs() / published < 0.25);
}

#[test]
fn small_parameter_counts() {
    let mut layout = ParameterLayout::new();
    layout.push("a.w", 2, 3, Init::GlorotUniform);
    layout.push("a.b", 2, 1, Init::Zeros);
    assert_eq!(ParameterVector::init(Arc::new(layout), 0).param_count(), 8);

    let cfg = ConvBranchConfig {
        input_shape: (4, 4),
        filter_layers: vec![filter_layer(PoolOrder::PoolThenActivation, Activation::Gelu)],
        lift_width: 4,
        mlp: mlp_cfg(4, 4, 1, 4, Activation::Swish, false),
    };
    let mut layout = ParameterLayout::new();
    register_conv_branch(&mut layout, "b", &cfg).unwrap();
    let i = layout.index_of("b.conv0.w").unwrap();
    let j = layout.index_of("b.conv0.b").unwrap();
    assert_eq!(layout.segment(i).len() + layout.segment(j).len(), 20);
}

#[test]
fn positive_wrap_reference_values() {
    assert_abs_diff_eq!(positive_wrap(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
    assert_abs_diff_eq!(positive_wrap(100.0), 100.0, epsilon = 1e-12);
    let tiny = positive_wrap(-100.0);
    assert!(tiny > 0.0 && tiny < 1e-40);
}

#[test]
fn forward_is_deterministic() {
    let cfg = DeepOnetConfig {
        branch: BranchConfig::Conv(standard_conv_branch(PoolOrder::PoolThenActivation)),
        trunk: mlp_cfg(3, 64, 4, 64, Activation::Swish, true),
        p: 64,
    };
    let mut layout = ParameterLayout::new();
    let segs = register_deeponet(&mut layout, "f", &cfg).unwrap();
    let pv = ParameterVector::init(Arc::new(layout), 13);
    let a: Vec<f64> = (0..2048).map(|i| ((i % 17) as f64) / 17.0).collect();
    let y = [0.5, 0.25, -0.3];
    let v1 = deeponet_eval(&cfg, &pv, &segs, &a, &y).unwrap();
    let v2 = deeponet_eval(&cfg, &pv, &segs, &a, &y).unwrap();
    assert_eq!(v1.to_bits(), v2.to_bits());
}

#[test]
fn shape_errors_are_reported() {
    // Indivisible conv chain.
    let bad = ConvBranchConfig {
        input_shape: (5, 7),
        filter_layers: vec![filter_layer(PoolOrder::PoolThenActivation, Activation::Gelu)],
        lift_width: 4,
        mlp: mlp_cfg(4, 4, 1, 4, Activation::Swish, false),
    };
    assert!(matches!(bad.flatten_len(), Err(Error::Shape(_))));

    // Branch/trunk width disagreement.
    let mismatched = DeepOnetConfig {
        branch: BranchConfig::Dense(mlp_cfg(8, 6, 2, 5, Activation::Swish, false)),
        trunk: mlp_cfg(2, 6, 2, 6, Activation::Swish, false),
        p: 6,
    };
    assert!(matches!(mismatched.validate(), Err(Error::Shape(_))));

    // Wrong input length at evaluation time.
    let cfg = mlp_cfg(3, 4, 2, 2, Activation::Tanh, false);
    let mut layout = ParameterLayout::new();
    let segs = register_mlp(&mut layout, "m", &cfg);
    let pv = ParameterVector::init(Arc::new(layout), 2);
    assert!(matches!(
        modified_mlp_forward(&cfg, &pv, &segs, &[1.0, 2.0]),
        Err(Error::Shape(_))
    ));
}
