use std::sync::OnceLock;

use streetscape::harness::{pick_masks, run_conflict, run_mask_variation, run_text_sweep, SweepConfig, SweepPlan};
use streetscape::pipeline::{run_pipeline, GenRequest, PipelineConfig, PipelineRun};
use streetscape::corpus::Split;

fn tiny() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(|| run_pipeline(&PipelineConfig::tiny(17), None).expect("tiny pipeline trains"))
}

#[test]
fn zero_step_sweep_has_no_shift() {
    let run = tiny();
    let test = run.split(Split::Test);
    let cfg = SweepConfig { plan: SweepPlan::TreeSky, steps: 3, step_pp: 0.0, n_per_step: 8, seed: 1, record: None };
    let report = run_text_sweep(&run.models, &run.corpus, &test, &cfg, 8).unwrap();
    assert_eq!(report.steps.len(), 3);
    for shift in report.shift_pp.values() {
        assert_eq!(*shift, 0.0);
    }
    let short = SweepConfig { n_per_step: 4, ..cfg };
    assert!(run_text_sweep(&run.models, &run.corpus, &test, &short, 8).is_err());
}

#[test]
fn generation_depends_only_on_the_request() {
    let run = tiny();
    let item = run.split(Split::Test)[0];
    let spec = item.record.condition();
    let a = GenRequest { spec, mask: None, seed: 5 };
    let b = GenRequest { spec, mask: Some(item.record.road_mask.clone()), seed: 5 };
    let c = GenRequest { spec, mask: None, seed: 6 };
    let alone = run.models.generate(std::slice::from_ref(&a), 1).unwrap();
    let mixed = run.models.generate(&[c.clone(), a.clone(), b.clone(), a], 3).unwrap();
    assert_eq!(alone[0], mixed[1]);
    assert_eq!(mixed[1], mixed[3]);
    assert_ne!(mixed[0], mixed[1]);
}

#[test]
fn conflict_and_mask_runs_validate_inputs() {
    let run = tiny();
    let test = run.split(Split::Test);
    let base = test[0];
    assert!(run_conflict(&run.models, &run.corpus, base, &[], 8, 1, 8).is_err());
    assert!(run_conflict(&run.models, &run.corpus, base, &[20.0, 10.0], 8, 1, 8).is_err());
    let masks = pick_masks(&test, 1);
    assert!(run_mask_variation(&run.models, &run.corpus, &base.record.condition(), &masks, 1, 1, 8).is_err());

    let masks = pick_masks(&test, 2);
    let report = run_mask_variation(&run.models, &run.corpus, &base.record.condition(), &masks, 1, 1, 8).unwrap();
    assert_eq!(report.outcomes.len(), 2 * 2);
    assert!((0.0..=1.0).contains(&report.own_beats_cross));
}

#[test]
fn identical_conflict_runs_match() {
    let run = tiny();
    let test = run.split(Split::Test);
    let targets = [5.0, 10.0];
    let a = run_conflict(&run.models, &run.corpus, test[0], &targets, 2, 3, 4).unwrap();
    let b = run_conflict(&run.models, &run.corpus, test[0], &targets, 2, 3, 1).unwrap();
    assert_eq!(a.with_mask, b.with_mask);
    assert_eq!(a.without_mask, b.without_mask);
}
