use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streetscape::conditioning::{encode_condition, ConditionSpec};
use streetscape::control::{mask_to_tensor, train_controlnet, ControlNet};
use streetscape::ddpm::{
    ancestral_sample, conditions_to_tensor, forward_diffuse, make_schedule, sample, train_base, Denoiser, DenoiserConfig,
    DiffusionError, ScheduleConfig, TrainConfig, TrainSample,
};
use streetscape::nn::Tensor;
use streetscape::taxonomy::{CityStyle, ClassPercents, ObjectCounts, RoadMask};

fn tiny_denoiser(seed: u64) -> Denoiser {
    let cfg = DenoiserConfig { resolution: 16, widths: [4, 8, 8], patch: 2, time_dim: 8, emb_dim: 8 };
    Denoiser::init(cfg, ScheduleConfig { steps: 20, beta_start: 1e-3, beta_end: 0.2, ..Default::default() }, seed)
}

fn spec() -> ConditionSpec {
    ConditionSpec {
        style: CityStyle::Sprawl,
        proportions: ClassPercents::from_array([20.0, 5.0, 10.0, 30.0, 20.0, 0.5]),
        counts: ObjectCounts::from_array([1, 1, 0, 0]),
    }
}

fn samples(n: usize, res: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TrainSample {
            id: format!("s{i:03}"),
            image: (0..3 * res * res).map(|_| rng.random_range(-1.0..1.0)).collect(),
            cond: encode_condition(&spec()),
            mask: Some((0..res * res).map(|k| f32::from(k % 3 == 0)).collect()),
        })
        .collect()
}

/// With a one-image data set the exact noise predictor is known in closed
/// form; ancestral sampling driven by it must land on that image.
#[test]
fn sampler_recovers_the_single_training_image() {
    let sched = make_schedule(&ScheduleConfig::default()).unwrap();
    let res = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target: Vec<f32> = (0..3 * res * res).map(|_| rng.random_range(-0.9..0.9)).collect();
    let plane = res * res;
    let (out, draws) = ancestral_sample(&sched, res, &[11, 12], |z: &Tensor<f32>, steps: &[usize]| {
        let n = z.n;
        let mut eps = z.clone();
        for b in 0..n {
            let ab = sched.alpha_bar(steps[b]);
            for c in 0..3 {
                for i in 0..plane {
                    let at = (c * n + b) * plane + i;
                    let x = target[c * plane + i] as f64;
                    eps.data[at] = ((z.data[at] as f64 - ab.sqrt() * x) / (1.0 - ab).sqrt()) as f32;
                }
            }
        }
        eps
    });
    assert_eq!(draws, vec![sched.steps() + 1; 2]);
    for b in 0..2 {
        for c in 0..3 {
            for i in 0..plane {
                let got = out.data[(c * 2 + b) * plane + i];
                assert!((got - target[c * plane + i]).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn forward_diffusion_with_zero_betas_is_identity() {
    let s = streetscape::ddpm::NoiseSchedule::from_betas(vec![0.0; 5]).unwrap();
    let z0 = vec![0.3f32, -0.7, 0.1];
    let eps = vec![1.0f32, 2.0, -1.0];
    assert_eq!(forward_diffuse(&z0, 3, &eps, &s).unwrap(), z0);
    assert!(streetscape::ddpm::NoiseSchedule::from_betas(vec![1.0]).is_err());
}

#[test]
fn zero_epochs_leave_weights_alone() {
    let mut d = tiny_denoiser(1);
    let before = d.weights_hash();
    let log = train_base(&mut d, &samples(4, 16, 1), &TrainConfig { epochs: 0, ..Default::default() }, |_, _, _| Ok(())).unwrap();
    assert!(log.epoch_losses.is_empty());
    assert_eq!(d.weights_hash(), before);
}

#[test]
fn training_ignores_input_order_and_is_seeded() {
    let cfg = TrainConfig { epochs: 2, batch_size: 3, lr: 1e-3, seed: 8, ..Default::default() };
    let data = samples(7, 16, 2);
    let mut reversed = data.clone();
    reversed.reverse();
    let mut a = tiny_denoiser(5);
    let mut b = tiny_denoiser(5);
    let la = train_base(&mut a, &data, &cfg, |_, _, _| Ok(())).unwrap();
    let lb = train_base(&mut b, &reversed, &cfg, |_, _, _| Ok(())).unwrap();
    assert_eq!(la.epoch_losses, lb.epoch_losses);
    assert_eq!(a.weights_hash(), b.weights_hash());
}

#[test]
fn empty_train_set_is_an_error() {
    let mut d = tiny_denoiser(1);
    let err = train_base(&mut d, &[], &TrainConfig::default(), |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, DiffusionError::EmptyTrainSet));
}

#[test]
fn sampling_is_deterministic_and_sized() {
    let d = tiny_denoiser(3);
    let sched = make_schedule(&d.schedule).unwrap();
    let conds = vec![encode_condition(&spec()); 3];
    let a = sample(&d, &conds, &[1, 2, 1], &sched, 2).unwrap();
    let b = sample(&d, &conds, &[1, 2, 1], &sched, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0], a[2]);
    assert_ne!(a[0], a[1]);
    assert_eq!(a[0].dimensions(), (16, 16));
    let wrong = make_schedule(&ScheduleConfig { steps: 7, ..d.schedule.clone() }).unwrap();
    assert!(sample(&d, &conds, &[1, 2, 3], &wrong, 2).is_err());
}

#[test]
fn trained_branch_responds_to_the_mask() {
    let res = 16;
    let base = tiny_denoiser(9);
    let mut cn = ControlNet::init(base);
    let data = samples(8, res, 3);
    let cfg = TrainConfig { epochs: 3, batch_size: 4, lr: 5e-3, seed: 2, ..Default::default() };
    train_controlnet(&mut cn, &data, &cfg, |_, _, _| Ok(())).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = Tensor::from_vec(3, 1, res, res, (0..3 * res * res).map(|_| rng.random_range(-1.0..1.0)).collect());
    let cond = conditions_to_tensor(&[encode_condition(&spec())]);
    let zeros = RoadMask::new(res, res, vec![0; res * res]);
    let ones = RoadMask::new(res, res, vec![1; res * res]);
    let a = cn.controlled_predict(&z, &[10], &cond, &mask_to_tensor(&[&zeros], res).unwrap());
    let b = cn.controlled_predict(&z, &[10], &cond, &mask_to_tensor(&[&ones], res).unwrap());
    let diff: f32 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 0.0);
    assert!(mask_to_tensor(&[&RoadMask::new(8, 8, vec![0; 64])], res).is_err());
}
