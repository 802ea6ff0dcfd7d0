use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selectfusion::fusion::{
    draw_gumbel, fuse_direct, HardContext, HardFusion, HardGradient, NoiseSource, SoftFusion,
};
use selectfusion::geometry::{global_pose_loss, relative_pose_loss, PoseNorm};
use selectfusion::harness::{frame_batch, ExperimentConfig, FusionChoice, Model, Task};
use selectfusion::nn::{
    Activation, BiLstmEncoder, FeedForwardEncoder, HiddenState, Linear, LstmCell, ParamId,
    ParameterStore, TemporalModel,
};
use selectfusion::simulator::{generate_episode, SimConfig};
use selectfusion::tensor::{Tape, Tensor, Var};

use super::{check, GradReport};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(17)
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn input(store: &mut ParameterStore, name: &str, shape: &[usize], rng: &mut impl Rng) -> ParamId {
    store.add(name, random(shape, rng)).unwrap()
}

/// A scalar that depends on every output entry with distinct weights.
fn reduce(tape: &mut Tape, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(
        Tensor::new(shape, (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect()).unwrap(),
    );
    let t = tape.tanh(y).unwrap();
    let wy = tape.mul(t, w).unwrap();
    let sq = tape.square(y).unwrap();
    let a = tape.sum(wy).unwrap();
    let b = tape.mean(sq).unwrap();
    tape.add(a, b).unwrap()
}

pub fn linear_layer() -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let l = Linear::new(&mut s, "fc", 4, 3, &mut rng).unwrap();
    let x = input(&mut s, "x", &[2, 4], &mut rng);
    check(&s, usize::MAX, &|t, p| {
        let y = l.forward(t, p, p.get(x)).unwrap();
        reduce(t, y)
    })
}

pub fn feedforward_encoder() -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let enc = FeedForwardEncoder::new(
        &mut s,
        "ff",
        &[5, 6, 3],
        Activation::Relu,
        Activation::Tanh,
        &mut rng,
    )
    .unwrap();
    let x = input(&mut s, "x", &[3, 5], &mut rng);
    check(&s, usize::MAX, &|t, p| {
        let y = enc.forward(t, p, p.get(x)).unwrap();
        reduce(t, y)
    })
}

pub fn lstm_cell_two_steps() -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let cell = LstmCell::new(&mut s, "lstm", 3, 4, &mut rng).unwrap();
    let x0 = input(&mut s, "x0", &[2, 3], &mut rng);
    let x1 = input(&mut s, "x1", &[2, 3], &mut rng);
    let h = input(&mut s, "h", &[2, 4], &mut rng);
    let c = input(&mut s, "c", &[2, 4], &mut rng);
    check(&s, usize::MAX, &|t, p| {
        let st = HiddenState {
            h: p.get(h),
            c: p.get(c),
        };
        let st = cell.step(t, p, p.get(x0), st).unwrap();
        let st = cell.step(t, p, p.get(x1), st).unwrap();
        let both = t.concat(st.h, st.c, 1).unwrap();
        reduce(t, both)
    })
}

pub fn bidirectional_encoder() -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let enc = BiLstmEncoder::new(&mut s, "bi", 3, 4, 2, &mut rng).unwrap();
    let w = input(&mut s, "w", &[2, 4, 3], &mut rng);
    check(&s, usize::MAX, &|t, p| {
        let y = enc.forward(t, p, p.get(w)).unwrap();
        reduce(t, y)
    })
}

pub fn temporal_model() -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let m = TemporalModel::new(&mut s, "tm", 4, 3, 6, &mut rng).unwrap();
    let z0 = input(&mut s, "z0", &[2, 4], &mut rng);
    let z1 = input(&mut s, "z1", &[2, 4], &mut rng);
    check(&s, usize::MAX, &|t, p| {
        let st = m.cell.zero_state(t, 2);
        let (y0, st) = m.step(t, p, p.get(z0), st).unwrap();
        let (y1, _) = m.step(t, p, p.get(z1), st).unwrap();
        let y = t.concat(y0, y1, 1).unwrap();
        reduce(t, y)
    })
}

pub fn direct_fusion() -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let a1 = input(&mut s, "a1", &[2, 3], &mut rng);
    let a2 = input(&mut s, "a2", &[2, 3], &mut rng);
    check(&s, usize::MAX, &|t, p| {
        let out = fuse_direct(t, p.get(a1), p.get(a2)).unwrap();
        reduce(t, out.z)
    })
}

pub fn soft_fusion() -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let f = SoftFusion::new(&mut s, "soft", 3, &mut rng).unwrap();
    let a1 = input(&mut s, "a1", &[2, 3], &mut rng);
    let a2 = input(&mut s, "a2", &[2, 3], &mut rng);
    check(&s, usize::MAX, &|t, p| {
        let out = f.forward(t, p, p.get(a1), p.get(a2)).unwrap();
        reduce(t, out.z)
    })
}

pub fn hard_fusion_relaxed(shared: bool) -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let f = HardFusion::new(&mut s, "hard", 3, shared, &mut rng).unwrap();
    // positive bias keeps every class weight away from the relu kink
    let bias_ids: Vec<ParamId> = s
        .iter()
        .filter(|p| p.name.ends_with(".b"))
        .map(|p| s.id(&p.name).unwrap())
        .collect();
    for id in bias_ids {
        let b = &mut s.get_mut(id).value;
        *b = b.map(|v| 1.5 + v);
    }
    let a1 = input(&mut s, "a1", &[2, 3], &mut rng);
    let a2 = input(&mut s, "a2", &[2, 3], &mut rng);
    let noise = draw_gumbel(&mut rng, &[2, 6, 2]).eps;
    check(&s, usize::MAX, &|t, p| {
        let mut ctx = HardContext {
            noise: NoiseSource::Frozen(&noise),
            tau: 0.7,
            gradient: HardGradient::Relaxed,
        };
        let out = f.forward(t, p, p.get(a1), p.get(a2), &mut ctx).unwrap();
        reduce(t, out.z)
    })
}

pub fn relative_loss(norm: PoseNorm) -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let pred = input(&mut s, "pred", &[3, 6], &mut rng);
    let gt = random(&[3, 6], &mut rng);
    check(&s, usize::MAX, &|t, p| {
        relative_pose_loss(t, p.get(pred), &gt, 100.0, norm).unwrap()
    })
}

pub fn global_loss() -> GradReport {
    let mut rng = rng();
    let mut s = ParameterStore::new();
    let pred = input(&mut s, "pred", &[3, 7], &mut rng);
    let mut gt = random(&[3, 7], &mut rng);
    for r in 0..3 {
        let row = &mut gt.data_mut()[r * 7 + 3..r * 7 + 7];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    check(&s, usize::MAX, &|t, p| {
        global_pose_loss(t, p.get(pred), &gt, 10.0).unwrap()
    })
}

/// Mean task loss of a small model over three frames of a two-episode batch.
pub fn full_model(fusion: FusionChoice, task: Task) -> GradReport {
    let mut cfg = ExperimentConfig {
        fusion,
        task,
        ..Default::default()
    };
    cfg.model.d = 3;
    cfg.model.obs_dim = 5;
    cfg.model.encoder_a_hidden = vec![4];
    cfg.model.encoder_b_hidden = 3;
    cfg.model.temporal_hidden = 4;
    let mut model = Model::build(&cfg).unwrap();
    if fusion == FusionChoice::Hard {
        let ids: Vec<ParamId> = model
            .store
            .iter()
            .filter(|p| p.name.starts_with("fusion") && p.name.ends_with(".b"))
            .map(|p| model.store.id(&p.name).unwrap())
            .collect();
        for id in ids {
            let b = &mut model.store.get_mut(id).value;
            *b = b.map(|v| 1.5 + v);
        }
    }
    let sim = SimConfig {
        frames: 4,
        obs_dim: 5,
        window: 3,
        ..Default::default()
    };
    let eps: Vec<_> = (0..2)
        .map(|i| generate_episode(i, i, &sim).unwrap())
        .collect();
    let refs: Vec<_> = eps.iter().collect();
    let frames: Vec<_> = (1..4)
        .map(|t| frame_batch(&refs, t, task, 0.1).unwrap())
        .collect();
    let mut rng = rng();
    let noise: Vec<Tensor> = (0..3)
        .map(|_| draw_gumbel(&mut rng, &[2, 6, 2]).eps)
        .collect();
    let model = &model;
    check(&model.store, usize::MAX, &|t, p| {
        let mut state = HiddenState {
            h: t.constant(Tensor::zeros(&[2, 4])),
            c: t.constant(Tensor::zeros(&[2, 4])),
        };
        let mut total: Option<Var> = None;
        for (fb, eps) in frames.iter().zip(&noise) {
            let mut ctx = HardContext {
                noise: NoiseSource::Frozen(eps),
                tau: 0.8,
                gradient: HardGradient::Relaxed,
            };
            let out = model
                .step(t, p, &fb.a, &fb.b, state, Some(&mut ctx))
                .unwrap();
            state = out.state;
            let l = model.loss(t, out.y, &fb.gt).unwrap();
            total = Some(match total {
                Some(s) => t.add(s, l).unwrap(),
                None => l,
            });
        }
        t.scale(total.unwrap(), 1.0 / 3.0).unwrap()
    })
}

/// Every gradient case, labeled.
pub fn all() -> Vec<(String, GradReport)> {
    let mut out = vec![
        ("linear".to_string(), linear_layer()),
        ("feedforward".into(), feedforward_encoder()),
        ("lstm cell".into(), lstm_cell_two_steps()),
        ("bilstm encoder".into(), bidirectional_encoder()),
        ("temporal model".into(), temporal_model()),
        ("direct fusion".into(), direct_fusion()),
        ("soft fusion".into(), soft_fusion()),
        ("hard fusion shared".into(), hard_fusion_relaxed(true)),
        ("hard fusion independent".into(), hard_fusion_relaxed(false)),
        (
            "relative loss squared".into(),
            relative_loss(PoseNorm::Squared),
        ),
        ("relative loss l2".into(), relative_loss(PoseNorm::L2)),
        ("global loss".into(), global_loss()),
    ];
    for task in [Task::RelativeOdometry, Task::GlobalRelocalization] {
        for fusion in FusionChoice::ALL {
            out.push((
                format!("model {}/{}", fusion.name(), task_name(task)),
                full_model(fusion, task),
            ));
        }
    }
    out
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::RelativeOdometry => "relative",
        Task::GlobalRelocalization => "global",
    }
}
