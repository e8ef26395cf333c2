use acsac_core::envs::generate_offline_data;
use acsac_core::io::{decode_checkpoint, encode_checkpoint, Checkpoint};
use acsac_core::train::{Mode, RunConfig, RunState};

fn tiny(mode: Mode) -> RunConfig {
    let mut c = RunConfig::for_mode(mode);
    c.batch = 4;
    c.dataset_episodes = 12;
    c.flow_hidden = vec![16, 16];
    c.critic.n_layer = 1;
    c.critic.d_ff = 16;
    c.eval_every = 25;
    c.eval_episodes = 4;
    c
}

fn fresh(c: RunConfig) -> RunState {
    let data = generate_offline_data(&c.maze().unwrap(), &c.behavior, c.data_seed(), c.dataset_episodes);
    RunState::new(c, data).unwrap()
}

#[test]
fn online_prefixes_run_to_completion_before_replanning() {
    let mut run = fresh(tiny(Mode::Acsac));
    run.run_online(150).unwrap();
    assert!(!run.online_episodes.is_empty());
    for ep in &run.online_episodes {
        assert_eq!(ep.selected.len(), ep.executed.len());
        assert_eq!(ep.executed.iter().sum::<usize>(), ep.length);
        let last = ep.executed.len() - 1;
        for (i, (&h, &e)) in ep.selected.iter().zip(&ep.executed).enumerate() {
            assert!((1..=run.config.horizon).contains(&h));
            if i < last {
                assert_eq!(e, h, "prefix cut short before the episode ended");
            } else {
                assert!(e >= 1 && e <= h);
            }
        }
    }
}

#[test]
fn fixed_chunk_agent_always_commits_to_its_length() {
    let mut run = fresh(tiny(Mode::FixedChunk(3)));
    run.run_online(60).unwrap();
    for ep in &run.online_episodes {
        assert!(ep.selected.iter().all(|&h| h == 3));
    }
    let report = run.evaluate(3).unwrap();
    assert!(report.episodes.iter().flat_map(|e| &e.decisions).all(|d| d.h == 3));
}

#[test]
fn single_step_agent_replans_every_step() {
    let mut run = fresh(tiny(Mode::SingleStep));
    run.run_online(30).unwrap();
    for ep in &run.online_episodes {
        assert!(ep.selected.iter().all(|&h| h == 1));
        assert_eq!(ep.selected.len(), ep.length);
    }
}

#[test]
fn replay_grows_by_one_transition_per_env_step() {
    let mut run = fresh(tiny(Mode::Acsac));
    let mut last = run.dataset.num_transitions();
    for _ in 0..40 {
        run.online_step().unwrap();
        let now = run.dataset.num_transitions();
        assert_eq!(now, last + 1);
        last = now;
    }
    assert_eq!(run.env_steps, 40);
}

#[test]
fn zero_steps_still_produce_one_evaluation() {
    let mut run = fresh(tiny(Mode::Acsac));
    run.run_offline(0).unwrap();
    assert_eq!(run.metrics.len(), 1);
    assert_eq!(run.metrics[0].step, 0);
    assert!(run.metrics[0].loss_flow.is_none());
}

#[test]
fn evaluation_cadence_and_final_record() {
    let mut run = fresh(tiny(Mode::Acsac));
    run.run_offline(60).unwrap();
    let steps: Vec<u64> = run.metrics.iter().map(|m| m.step).collect();
    assert_eq!(steps, vec![25, 50, 60]);
    assert!(run.metrics.iter().all(|m| m.loss_critic.is_some_and(f64::is_finite)));
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let go = || {
        let mut run = fresh(tiny(Mode::Acsac));
        run.run_offline(30).unwrap();
        run.run_online(30).unwrap();
        let report = run.evaluate(4).unwrap();
        (run.metrics_jsonl(), encode_checkpoint(&Checkpoint::from_run(&run)).unwrap(), report)
    };
    let (a, b) = (go(), go());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn evaluation_does_not_disturb_training() {
    let mut a = fresh(tiny(Mode::Acsac));
    let mut b = fresh(tiny(Mode::Acsac));
    b.evaluate(3).unwrap();
    for _ in 0..5 {
        assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
    }
}

#[test]
fn checkpoint_restores_identical_outputs() {
    let mut run = fresh(tiny(Mode::FixedChunk(2)));
    run.run_offline(10).unwrap();
    let bytes = encode_checkpoint(&Checkpoint::from_run(&run)).unwrap();
    let ck = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&ck).unwrap(), bytes);
    let restored = ck.into_run_state(run.config.clone(), run.dataset.clone()).unwrap();
    assert_eq!(restored.offline_steps, 10);
    assert_eq!(run.evaluate(3).unwrap(), restored.evaluate(3).unwrap());
    let obs = [1.0f32, 1.0, 6.0, 7.0];
    let chunks: Vec<f32> = (0..2 * run.config.horizon * 2).map(|i| (i as f32).cos()).collect();
    assert_eq!(
        run.critic.q_values(&obs, &chunks).unwrap(),
        restored.critic.q_values(&obs, &chunks).unwrap()
    );
    assert_eq!(
        run.target.as_ref().unwrap().q_values(&obs, &chunks).unwrap(),
        restored.target.as_ref().unwrap().q_values(&obs, &chunks).unwrap()
    );
}
