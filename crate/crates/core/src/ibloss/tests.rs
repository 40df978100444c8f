use super::*;
use crate::autodiff::{gradcheck, Tensor};
use crate::model::{Mode, Model, ModelConfig, Noise};
use crate::numerics::Rng;
use crate::quantizer::{QuantizerSpec, SoftMode};

fn config(quantized: bool) -> ModelConfig {
    ModelConfig {
        input_dims: vec![4, 6],
        feature_dim: 2,
        breakpoints: 3,
        quantized,
        gamma: 10.0,
        soft_mode: SoftMode::Scaled,
        hidden: vec![5],
        classes: 10,
    }
}

struct Instance {
    model: Model,
    inputs: Vec<Tensor>,
    noise: Noise,
    labels: Vec<usize>,
    channels: Vec<ChannelSpec>,
}

fn instance(quantized: bool, seed: u64) -> Instance {
    let model = Model::new(config(quantized), &mut Rng::new(seed)).unwrap();
    let mut rng = Rng::new(seed + 1);
    let batch = 4;
    let inputs = model
        .config()
        .input_dims
        .iter()
        .map(|&n| Tensor::from_fn(batch, n, |_, _| rng.uniform()))
        .collect();
    let channels = vec![ChannelSpec::from_psnr(10.0).unwrap(), ChannelSpec::from_psnr(4.0).unwrap()];
    let noise = Noise::sample(&mut rng, batch, 3, 2, &channels);
    Instance {
        model,
        inputs,
        noise,
        labels: vec![3, 0, 9, 3],
        channels,
    }
}

fn evaluate(inst: &Instance, betas: &[f64], variant: KlVariant) -> (Tape, PipelineOutput, LossVars) {
    let mut tape = Tape::new();
    let vars = inst.model.params().bind(&mut tape);
    let out = inst
        .model
        .forward_with_noise(&mut tape, &vars, &inst.inputs, &inst.noise, Mode::Train)
        .unwrap();
    let loss = total_loss(&mut tape, &out, &inst.labels, betas, &inst.channels, variant).unwrap();
    (tape, out, loss)
}

#[test]
fn hand_evaluated_examples() {
    let pmf = QuantizedPmf::from_rows(&[vec![0.5, 0.5]]).unwrap();
    let levels = [-1.0, 1.0];
    let lit = dkl_star(&pmf, &levels, 1.0, KlVariant::Literal).unwrap();
    assert!((lit.total - 1.0).abs() < 1e-15);
    let tight = dkl_star(&pmf, &levels, 1.0, KlVariant::Tight).unwrap();
    assert!((tight.total - 0.5).abs() < 1e-15);
    let degenerate = QuantizedPmf::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let d = dkl_star(&degenerate, &levels, 1.0, KlVariant::Tight).unwrap();
    assert!((d.total - (2f64.ln() + 0.5)).abs() < 1e-15);
    assert!(dkl_star(&pmf, &levels, 0.0, KlVariant::Tight).is_err());
    assert!(dkl_star(&pmf, &[0.0, 0.5, 1.0], 1.0, KlVariant::Tight).is_err());
}

#[test]
fn variant_gap_is_half_second_moment() {
    let mut rng = Rng::new(31);
    for _ in 0..50 {
        let t = 1 + rng.below(15);
        let spec = QuantizerSpec::new(
            (0..t).map(|_| rng.uniform_range(0.2, 2.0)).collect(),
            crate::quantizer::initial_breakpoints(t),
            10.0,
        )
        .unwrap();
        let mu: Vec<f64> = (0..3).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let theta: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.1, 2.0)).collect();
        let pmf = spec.conditional_pmf(&mu, &theta).unwrap();
        let s2 = rng.uniform_range(0.01, 0.9);
        let tight = dkl_star(&pmf, spec.levels(), s2, KlVariant::Tight).unwrap();
        let lit = dkl_star(&pmf, spec.levels(), s2, KlVariant::Literal).unwrap();
        for (i, row) in pmf.rows().enumerate() {
            let half_moment: f64 = 0.5 * row.iter().zip(spec.levels()).map(|(p, c)| p * c * c).sum::<f64>();
            assert!(tight.per_dim[i] <= lit.per_dim[i]);
            assert!((lit.per_dim[i] - tight.per_dim[i] - half_moment).abs() < 1e-13);
        }
    }
}

#[test]
fn tape_bound_matches_plain() {
    let spec = QuantizerSpec::new(vec![1.0, 0.5, 2.0], vec![-0.4, 0.1, 0.6], 10.0).unwrap();
    let mu = [0.3, -1.2, 0.05];
    let theta = [0.4, 0.9, 1.7];
    let pmf = spec.conditional_pmf(&mu, &theta).unwrap();
    for variant in [KlVariant::Tight, KlVariant::Literal] {
        let plain = dkl_star(&pmf, spec.levels(), 0.2, variant).unwrap();
        let mut tape = Tape::new();
        let rows: Vec<f64> = pmf.rows().flatten().copied().collect();
        let p = tape.leaf(Tensor::new(3, 4, rows).unwrap());
        let l = tape.leaf(Tensor::row(spec.levels()));
        let col = dkl_star_tape(&mut tape, p, l, 0.2, variant).unwrap();
        for (a, b) in tape.value(col).data().iter().zip(&plain.per_dim) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn gaussian_kl_closed_form() {
    let kl = gaussian_kl(&[0.0, 1.0, 0.5], &[1.0, 1.0, 0.3], 0.0).unwrap();
    assert!(kl[0].abs() < 1e-16);
    assert!((kl[1] - 0.5).abs() < 1e-15);
    assert!(kl[2] > 0.0);
    let mut tape = Tape::new();
    let m = tape.leaf(Tensor::row(&[0.0, 1.0, 0.5]));
    let t = tape.leaf(Tensor::row(&[1.0, 1.0, 0.3]));
    let v = gaussian_kl_tape(&mut tape, m, t, 0.25).unwrap();
    let plain = gaussian_kl(&[0.0, 1.0, 0.5], &[1.0, 1.0, 0.3], 0.25).unwrap();
    for (a, b) in tape.value(v).data().iter().zip(&plain) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn uniform_decoder_gives_chance_cross_entropy() {
    let mut inst = instance(true, 40);
    let i = inst.model.params().index_of("dec1.w").unwrap();
    inst.model.params_mut().tensor_mut(i).data_mut().fill(0.0);
    let (tape, _, loss) = evaluate(&inst, &[0.0, 0.0], KlVariant::Tight);
    let b = loss.breakdown(&tape);
    assert!((b.ce_term - 10f64.ln()).abs() < 1e-14);
    assert_eq!(b.total, b.ce_term);
}

#[test]
fn matches_hand_composed_objective() {
    for quantized in [true, false] {
        let inst = instance(quantized, 50);
        let betas = [1e-2, 0.3];
        let (tape, out, loss) = evaluate(&inst, &betas, KlVariant::Tight);
        let got = loss.breakdown(&tape);

        let lp = tape.value(out.log_probs);
        let (b, l) = (out.batch, out.draws);
        let mut ce = 0.0;
        for draw in 0..l {
            for m in 0..b {
                ce -= lp.get(draw * b + m, inst.labels[m]);
            }
        }
        ce /= (b * l) as f64;

        let mut total = ce;
        for k in 0..2 {
            let mu = tape.value(out.devices[k].mu).data();
            let theta = tape.value(out.devices[k].theta).data();
            let s2 = inst.channels[k].sigma2();
            let per_dim = match inst.model.quantizer(k).unwrap() {
                Some(q) => {
                    let pmf = q.conditional_pmf(mu, theta).unwrap();
                    dkl_star(&pmf, q.levels(), s2, KlVariant::Tight).unwrap().per_dim
                }
                None => gaussian_kl(mu, theta, s2).unwrap(),
            };
            let kl = per_dim.iter().sum::<f64>() / b as f64;
            assert!((got.kl_terms[k] - kl).abs() < 1e-10);
            assert!(kl >= -1e-9);
            total += betas[k] * kl;
        }
        assert!((got.ce_term - ce).abs() < 1e-12);
        assert!((got.total - total).abs() < 1e-10);
    }
}

#[test]
fn invariant_to_noise_draw_order() {
    let inst = instance(true, 60);
    let (tape, _, loss) = evaluate(&inst, &[0.1, 0.1], KlVariant::Tight);
    let base = loss.breakdown(&tape).total;

    let mut shuffled = instance(true, 60);
    let b = 4;
    let d = 2;
    for t in &mut shuffled.noise.channel {
        let src = t.clone();
        // draw order (0, 1, 2) -> (2, 0, 1)
        for (to, from) in [(0, 2), (1, 0), (2, 1)] {
            for r in 0..b {
                for c in 0..d {
                    t.set(to * b + r, c, src.get(from * b + r, c));
                }
            }
        }
    }
    let (tape, _, loss) = evaluate(&shuffled, &[0.1, 0.1], KlVariant::Tight);
    assert!((loss.breakdown(&tape).total - base).abs() < 1e-12);
}

#[test]
fn rejects_bad_labels_and_betas() {
    let mut inst = instance(true, 70);
    let mut tape = Tape::new();
    let vars = inst.model.params().bind(&mut tape);
    let out = inst
        .model
        .forward_with_noise(&mut tape, &vars, &inst.inputs, &inst.noise, Mode::Train)
        .unwrap();
    assert!(total_loss(&mut tape, &out, &inst.labels, &[0.1], &inst.channels, KlVariant::Tight).is_err());
    assert!(total_loss(&mut tape, &out, &inst.labels, &[0.1, -1.0], &inst.channels, KlVariant::Tight).is_err());
    inst.labels[2] = 10;
    let err = total_loss(&mut tape, &out, &inst.labels, &[0.1, 0.1], &inst.channels, KlVariant::Tight);
    assert!(matches!(err, Err(Error::LabelRange { label: 10, classes: 10 })));
}

#[test]
fn total_loss_gradcheck() {
    for (quantized, variant) in [(true, KlVariant::Tight), (true, KlVariant::Literal), (false, KlVariant::Tight)] {
        let inst = instance(quantized, 80);
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let out = inst
                .model
                .forward_with_noise(tape, vars, &inst.inputs, &inst.noise, Mode::Train)?;
            Ok(total_loss(tape, &out, &inst.labels, &[0.05, 0.2], &inst.channels, variant)?.total)
        };
        gradcheck(f, inst.model.params(), 1e-6, 1e-4).unwrap();
    }
}
