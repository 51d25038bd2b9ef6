use klonet_core::attention::DynamicKnnAttention;
use klonet_core::csp::{csp_param_count, CspOptions};
use klonet_core::model::{Model, ModelSpec, Stage, Variant};
use klonet_core::nn::DoubleConv;

/// Closed-form count for the symmetric encoder-decoder layout, written
/// independently of the model builder.
fn oracle(use_csp: bool, use_attention: bool) -> usize {
    let c = [32usize, 64, 128, 256, 512];
    let conv_bn_relu = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let double = |cin: usize, cout: usize| conv_bn_relu(cin, cout, 3) + conv_bn_relu(cout, cout, 3);
    let csp = |cin: usize, cout: usize| {
        let h = cout / 2;
        2 * conv_bn_relu(cin, h, 1) + 3 * (conv_bn_relu(h, h, 1) + conv_bn_relu(h, h, 3)) + conv_bn_relu(2 * h, cout, 1)
    };
    let attn = |ch: usize| 4 * ch * ch + ch + (ch * ch / 4 + ch / 4) + (ch / 4 + 1);
    let mut total = 0;
    let mut cin = 1;
    for (i, &w) in c.iter().enumerate() {
        total += if use_csp { csp(cin, w) } else { double(cin, w) };
        if use_attention && i >= 3 {
            total += attn(w);
        }
        cin = w;
    }
    for i in (0..4).rev() {
        total += double(c[i + 1] + c[i], c[i]);
    }
    total + 32 * 2 + 2
}

#[test]
fn ablation_variants_match_reference_counts() {
    for v in Variant::ABLATION {
        let model = Model::build(&v.spec(), 0).unwrap();
        assert_eq!(model.count_parameters().total, v.reference_params(), "{v}");
        assert_eq!(model.store.num_trainable(), v.reference_params(), "{v}");
    }
}

#[test]
fn vanilla_unet_matches_reference_count() {
    let model = Model::build(&Variant::VanillaUnet.spec(), 0).unwrap();
    assert_eq!(model.count_parameters().total, 17_261_825);
}

#[test]
fn independent_oracle_agrees() {
    assert_eq!(oracle(false, false), Model::build(&Variant::Baseline.spec(), 1).unwrap().store.num_trainable());
    assert_eq!(oracle(true, false), Model::build(&Variant::Csp.spec(), 1).unwrap().store.num_trainable());
    assert_eq!(oracle(false, true), Model::build(&Variant::Attention.spec(), 1).unwrap().store.num_trainable());
    assert_eq!(oracle(true, true), Model::build(&Variant::KloNet.spec(), 1).unwrap().store.num_trainable());
}

#[test]
fn analytic_helpers_agree_with_modules() {
    let opts = CspOptions::default();
    assert_eq!(csp_param_count(1, 32, 3, opts).unwrap(), {
        let h = 16;
        2 * (h + 2 * h) + 3 * (h * h + 2 * h + 9 * h * h + 2 * h) + (2 * h * 32 + 64)
    });
    assert_eq!(DynamicKnnAttention::count(256, true), 4 * 256 * 256 + 256 + 64 * 256 + 64 + 65);
    assert_eq!(DoubleConv::count(1, 32, 32, false), 9 * 32 + 64 + 9 * 32 * 32 + 64);
}

#[test]
fn per_layer_table_sums_to_total() {
    let model = Model::build(&Variant::KloNet.spec(), 3).unwrap();
    let table = model.count_parameters();
    assert_eq!(table.rows.iter().map(|r| r.1).sum::<usize>(), table.total);
    let names: Vec<&str> = table.rows.iter().map(|r| r.0.as_str()).collect();
    assert!(names.contains(&"encoder4.attention"));
    assert!(names.contains(&"bottleneck.attention"));
    assert!(!names.contains(&"encoder3.attention"));
    assert_eq!(names.last(), Some(&"head"));
}

#[test]
fn moving_attention_sites_changes_count() {
    let mut spec = ModelSpec::default();
    spec.attention_sites = [Stage::Bottleneck].into_iter().collect();
    let m = Model::build(&spec, 0).unwrap();
    assert_eq!(m.store.num_trainable(), Variant::KloNet.reference_params() - DynamicKnnAttention::count(256, true));
}

#[test]
fn construction_is_deterministic() {
    let a = Model::build(&Variant::KloNet.spec(), 9).unwrap();
    let b = Model::build(&Variant::KloNet.spec(), 9).unwrap();
    let c = Model::build(&Variant::KloNet.spec(), 10).unwrap();
    assert_eq!(a.store.checksum(), b.store.checksum());
    assert_ne!(a.store.checksum(), c.store.checksum());
}

#[test]
fn analytic_profile_counts_match_built_models() {
    for v in [Variant::Baseline, Variant::Csp, Variant::Attention, Variant::KloNet, Variant::VanillaUnet] {
        let prof = klonet_core::profile::profile(&v.spec(), 256, 256).unwrap();
        let model = Model::build(&v.spec(), 0).unwrap();
        assert_eq!(prof.params, model.store.num_trainable(), "{v}");
        let table = model.count_parameters();
        for b in prof.blocks.iter().filter(|b| b.params > 0) {
            let row = table.rows.iter().find(|r| r.0 == b.name).unwrap_or_else(|| panic!("{v}: no row {}", b.name));
            assert_eq!(row.1, b.params, "{v} {}", b.name);
        }
    }
}

#[test]
fn flop_ratio_against_vanilla() {
    let k = klonet_core::profile::profile(&Variant::KloNet.spec(), 256, 256).unwrap();
    let v = klonet_core::profile::profile(&Variant::VanillaUnet.spec(), 256, 256).unwrap();
    let ratio = k.flops as f64 / v.flops as f64;
    assert!((0.285..=0.385).contains(&ratio), "{ratio}");
}
