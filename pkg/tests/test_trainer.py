import json

import numpy as np
import pytest

import routezero.trainer as trainer_mod
from routezero.env import game_outcome, initial_state, legal_actions, objective, step
from routezero.instance import EvrpInstance, TspInstance, generate_tsp
from routezero.net import CheckpointError, NetConfig, PolicyValueNet, featurize
from routezero.planner import PlannerConfig
from routezero.trainer import (
    METRICS_HEADER,
    PolicyBuffer,
    TrainConfig,
    TrainerError,
    TrainerState,
    ValueBuffer,
    arena_evaluate,
    derived_seed,
    load_checkpoint,
    make_instance,
    run_episode,
    save_checkpoint,
    stage_gate,
    train,
    train_config_from_dict,
    train_config_to_dict,
    value_tuples,
)

TINY_NET = dict(embed_dim=16, n_heads=2, n_layers=1, ffn_dim=32, batch_size=8, learning_rate=1e-3)


def tiny_cfg(**overrides):
    base = dict(
        problem="tsp",
        n_nodes=4,
        total_episodes=4,
        stage_switch=2,
        self_play_prob=0.5,
        planner=PlannerConfig(n_simulations=6, m_root=4),
        net=NetConfig(problem="tsp", **TINY_NET),
        arena_size=2,
        arena_interval=2,
        train_steps_per_episode=1,
        checkpoint_interval=2,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_nets(problem="tsp", seed=0):
    theta = PolicyValueNet.create(NetConfig(problem=problem, **TINY_NET), seed=seed)
    return theta, theta.copy()


class TestTrainConfig:
    def test_round_trip_through_dict(self):
        cfg = tiny_cfg()
        assert train_config_from_dict(train_config_to_dict(cfg)) == cfg

    def test_net_defaults_follow_problem(self):
        cfg = train_config_from_dict({"problem": "dm-evrp", "n_customers": 2, "n_stations": 1})
        assert cfg.net.problem == "evrp"

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys: budget"):
            train_config_from_dict({"budget": 3})

    @pytest.mark.parametrize(
        "overrides",
        [
            {"problem": "vrp"},
            {"self_play_prob": 1.0},
            {"self_play_prob": -0.1},
            {"stage_switch": 99},
            {"total_episodes": 0},
            {"train_steps_per_episode": -1},
            {"n_nodes": 1},
            {"net": NetConfig(problem="evrp", **TINY_NET)},
        ],
    )
    def test_validation(self, overrides):
        with pytest.raises(ValueError):
            tiny_cfg(**overrides)

    def test_nested_configs_parse_from_plain_dicts(self):
        raw = train_config_to_dict(tiny_cfg())
        assert isinstance(raw["planner"], dict) and isinstance(raw["net"], dict)
        cfg = train_config_from_dict(raw)
        assert cfg.planner == PlannerConfig(n_simulations=6, m_root=4)


class TestStageGate:
    def test_boundaries(self):
        cfg = tiny_cfg(total_episodes=10, stage_switch=3)
        assert [stage_gate(e, cfg) for e in range(5)] == [1, 1, 1, 2, 2]

    def test_all_stage_two(self):
        cfg = tiny_cfg(stage_switch=0)
        assert stage_gate(0, cfg) == 2

    def test_all_stage_one(self):
        cfg = tiny_cfg(stage_switch=4, total_episodes=4)
        assert stage_gate(3, cfg) == 1


def feature_of(inst, moves=()):
    state = initial_state(inst)
    for a in moves:
        state = step(state, a)
    return featurize(state), legal_actions(state) if not state.done else None


class TestPolicyBuffer:
    def make_entry(self, inst, action):
        feats, legal = feature_of(inst)
        target = np.zeros(inst.n_nodes)
        target[action] = 1.0
        return feats, legal, target

    def test_push_sample(self):
        inst = generate_tsp(4, seed=0)
        buf = PolicyBuffer(capacity=8)
        buf.push(*self.make_entry(inst, 1))
        batch = buf.sample(5, np.random.default_rng(0))
        assert batch["nodes"].shape == (5, 4, 5)
        assert batch["target"].sum(axis=1) == pytest.approx(np.ones(5))

    def test_fifo_eviction(self):
        inst = generate_tsp(4, seed=0)
        buf = PolicyBuffer(capacity=2)
        for action in (0, 1, 2):
            buf.push(*self.make_entry(inst, action))
        assert len(buf) == 2
        kept = {int(np.argmax(t)) for _, _, t in buf.entries}
        assert kept == {1, 2}

    def test_rejects_bad_targets(self):
        inst = generate_tsp(4, seed=0)
        feats, legal = feature_of(inst)
        buf = PolicyBuffer(capacity=4)
        with pytest.raises(ValueError):
            buf.push(feats, legal, np.full(4, 0.5))
        with pytest.raises(ValueError):
            buf.push(feats, legal, np.array([1.5, -0.5, 0.0, 0.0]))
        with pytest.raises(ValueError):
            buf.push(feats, np.zeros(4, dtype=bool), np.array([1.0, 0.0, 0.0, 0.0]))

    def test_empty_sample_is_none(self):
        assert PolicyBuffer(4).sample(2, np.random.default_rng(0)) is None

    def test_array_round_trip(self):
        inst = generate_tsp(4, seed=0)
        buf = PolicyBuffer(capacity=4)
        buf.push(*self.make_entry(inst, 1))
        buf.push(*self.make_entry(inst, 3))
        clone = PolicyBuffer.from_arrays(buf.to_arrays("p/"), "p/", capacity=4)
        assert len(clone) == 2
        np.testing.assert_array_equal(clone.entries[1][2], buf.entries[1][2])

    def test_empty_round_trip(self):
        clone = PolicyBuffer.from_arrays(PolicyBuffer(4).to_arrays("p/"), "p/", capacity=4)
        assert len(clone) == 0


class TestValueBuffer:
    def test_outcome_must_be_unit(self):
        inst = generate_tsp(4, seed=0)
        feats, _ = feature_of(inst)
        buf = ValueBuffer(4)
        with pytest.raises(ValueError):
            buf.push(feats, feats, 0.5)

    def test_sample_and_round_trip(self):
        inst = generate_tsp(4, seed=0)
        a, _ = feature_of(inst)
        b, _ = feature_of(inst, moves=(2,))
        buf = ValueBuffer(4)
        buf.push(a, b, 1.0)
        buf.push(b, a, -1.0)
        batch = buf.sample(3, np.random.default_rng(1))
        assert set(batch) == {"own_nodes", "opp_nodes", "z"}
        assert set(np.unique(batch["z"])) <= {-1.0, 1.0}
        clone = ValueBuffer.from_arrays(buf.to_arrays("v/"), "v/", capacity=4)
        assert len(clone) == 2
        assert clone.entries[0][2] == 1.0
        np.testing.assert_array_equal(clone.entries[1][0].nodes, b.nodes)


class TestValueTuples:
    def traj(self, inst, moveses):
        out = [initial_state(inst)]
        for a in moveses:
            out.append(step(out[-1], a))
        return tuple(out)

    def test_aligned_families(self):
        inst = generate_tsp(4, seed=1)
        first = self.traj(inst, (0, 1, 2, 3))
        second = self.traj(inst, (3, 2, 1, 0))
        tuples = value_tuples(first, second, outcome=1, offset=False)
        assert len(tuples) == 2 * len(first)
        own, opp, z = tuples[0]
        assert own is first[0] and opp is second[0] and z == 1.0
        own, opp, z = tuples[1]
        assert own is second[0] and opp is first[0] and z == -1.0

    def test_offset_sees_the_next_state(self):
        inst = generate_tsp(4, seed=1)
        first = self.traj(inst, (0, 1, 2, 3))
        second = self.traj(inst, (3, 2, 1, 0))
        tuples = value_tuples(first, second, outcome=-1, offset=True)
        own, opp, z = tuples[1]
        assert own is second[0] and opp is first[1] and z == 1.0
        own, opp, _ = tuples[-1]
        assert own is second[-1] and opp is first[-1], "clamped at the terminal state"

    def test_unequal_lengths_use_the_shorter(self):
        inst = generate_tsp(4, seed=1)
        first = self.traj(inst, (0, 1))
        second = self.traj(inst, (3, 2, 1, 0))
        tuples = value_tuples(first, second, outcome=1)
        assert len(tuples) == 2 * len(first)


class TestSeedsAndInstances:
    def test_derived_seed_is_stable_and_keyed(self):
        assert derived_seed(1, 2, 3) == derived_seed(1, 2, 3)
        assert derived_seed(1, 2, 3) != derived_seed(1, 2, 4)
        assert derived_seed(1, 0, 3) != derived_seed(1, 1, 3)

    def test_make_instance_dispatch(self):
        tsp = make_instance(tiny_cfg(), seed=5)
        assert isinstance(tsp, TspInstance) and tsp.n_nodes == 4
        dm = make_instance(
            tiny_cfg(problem="dm-evrp", n_customers=2, n_stations=1, net=NetConfig(problem="evrp", **TINY_NET)),
            seed=5,
        )
        assert isinstance(dm, EvrpInstance) and dm.objective_mode == "DM"
        em = make_instance(
            tiny_cfg(problem="em-evrp", n_customers=2, n_stations=1, net=NetConfig(problem="evrp", **TINY_NET)),
            seed=5,
        )
        assert em.objective_mode == "EM"


class TestRunEpisode:
    def play(self, stage, seed=0, **overrides):
        cfg = tiny_cfg(**overrides)
        inst = generate_tsp(cfg.n_nodes, seed=3)
        record = run_episode(inst, tiny_nets(seed=seed), cfg, stage, np.random.default_rng(seed))
        return inst, record

    def test_trajectories_finish_and_score(self):
        inst, record = self.play(stage=1)
        assert record.traj_first[-1].done and record.traj_second[-1].done
        assert record.objective_first == pytest.approx(objective(inst, record.traj_first[-1].route))
        assert record.outcome == game_outcome(-record.objective_first, -record.objective_second)

    def test_stage1_competitor_never_searches(self):
        _, record = self.play(stage=1)
        learner_sims = record.sims_first if record.learner == 1 else record.sims_second
        competitor_sims = record.sims_second if record.learner == 1 else record.sims_first
        assert set(competitor_sims) == {0}
        assert min(learner_sims) > 0
        assert len(record.policy_samples) == len(learner_sims)

    def test_stage2_both_search(self):
        _, record = self.play(stage=2)
        assert min(record.sims_first) > 0 and min(record.sims_second) > 0
        assert len(record.policy_samples) == len(record.sims_first) + len(record.sims_second)

    def test_deterministic_given_rng(self):
        _, a = self.play(stage=2, seed=4)
        _, b = self.play(stage=2, seed=4)
        assert a.traj_first[-1].route == b.traj_first[-1].route
        assert a.learner == b.learner and a.outcome == b.outcome

    def test_learner_objective_follows_the_seat(self):
        _, record = self.play(stage=1)
        if record.learner == 1:
            assert record.learner_objective == record.objective_first
        else:
            assert record.learner_objective == record.objective_second

    def test_stage1_competitor_replays_historical_best_greedily(self):
        cfg = tiny_cfg(self_play_prob=0.0)
        inst = generate_tsp(cfg.n_nodes, seed=3)
        theta = PolicyValueNet.create(cfg.net, seed=0)
        theta_best = PolicyValueNet.create(cfg.net, seed=9)
        record = run_episode(inst, (theta, theta_best), cfg, stage=1, rng=np.random.default_rng(2))
        competitor_traj = record.traj_second if record.learner == 1 else record.traj_first
        from routezero.net import greedy_action

        state = initial_state(inst)
        for nxt in competitor_traj[1:]:
            state = step(state, greedy_action(theta_best, state))
            assert state.route == nxt.route


class TestArena:
    def test_identical_nets_are_a_draw(self):
        theta, theta_best = tiny_nets()
        instances = [generate_tsp(4, seed=s) for s in range(3)]
        updated, reward_sum = arena_evaluate(theta, theta_best, instances)
        assert not updated, "ties must not replace the historical best"
        assert reward_sum == 0.0

    def test_sum_matches_manual_recompute(self):
        from routezero.baselines import greedy_rollout

        theta = PolicyValueNet.create(NetConfig(problem="tsp", **TINY_NET), seed=0)
        other = PolicyValueNet.create(NetConfig(problem="tsp", **TINY_NET), seed=5)
        instances = [generate_tsp(5, seed=s) for s in range(4)]
        updated, reward_sum = arena_evaluate(theta, other, instances)
        manual = sum(
            greedy_rollout(inst, other).objective - greedy_rollout(inst, theta).objective
            for inst in instances
        )
        assert reward_sum == pytest.approx(manual, rel=1e-12)
        assert updated == (manual > 0.0)


class TestCheckpoint:
    def fresh_state(self, cfg):
        theta = PolicyValueNet.create(cfg.net, seed=cfg.seed)
        return TrainerState(theta, theta.copy(), PolicyBuffer(8), ValueBuffer(8), episode=3)

    def test_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        state = self.fresh_state(cfg)
        inst = generate_tsp(4, seed=0)
        feats, legal = feature_of(inst)
        target = np.zeros(4)
        target[1] = 1.0
        state.policy_buffer.push(feats, legal, target)
        state.value_buffer.push(feats, feats, -1.0)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, cfg, state)
        cfg2, state2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert state2.episode == 3
        assert len(state2.policy_buffer) == 1 and len(state2.value_buffer) == 1
        for k in state.theta.params:
            np.testing.assert_array_equal(state2.theta.params[k], state.theta.params[k])
            np.testing.assert_array_equal(state2.theta_best.params[k], state.theta_best.params[k])

    def test_version_mismatch(self, tmp_path):
        cfg = tiny_cfg()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, cfg, self.fresh_state(cfg))
        data = dict(np.load(path))
        data["meta/version"] = np.array(99)
        np.savez(path, **data)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "ckpt.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="unreadable"):
            load_checkpoint(path)


def read_metrics(run_dir):
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == METRICS_HEADER
    return [line.split(",") for line in lines[1:]]


def read_events(run_dir):
    return [json.loads(line) for line in (run_dir / "events.log").read_text().splitlines()]


class TestTrainLoop:
    def test_artifacts_and_stage_column(self, tmp_path):
        cfg = tiny_cfg()
        ckpt = train(cfg, tmp_path / "run")
        assert ckpt.exists()
        assert (tmp_path / "run" / "config.json").exists()
        rows = read_metrics(tmp_path / "run")
        assert [r[0] for r in rows] == ["1", "2", "3", "4"]
        assert [r[1] for r in rows] == ["1", "1", "2", "2"]
        assert all(r[7] == "" for r in rows), "soc column is blank for TSP"
        events = read_events(tmp_path / "run")
        kinds = {e["event"] for e in events}
        assert {"episode", "arena", "checkpoint"} <= kinds
        saved = json.loads((tmp_path / "run" / "config.json").read_text())
        assert train_config_from_dict(saved) == cfg

    def test_metrics_are_reproducible(self, tmp_path):
        cfg = tiny_cfg()
        train(cfg, tmp_path / "a")
        train(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_interrupt_resume_matches_uninterrupted(self, tmp_path, monkeypatch):
        cfg = tiny_cfg()
        train(cfg, tmp_path / "full")

        real = trainer_mod.run_episode
        calls = {"n": 0}

        def bomb(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 3:
                raise RuntimeError("simulated crash")
            return real(*args, **kwargs)

        monkeypatch.setattr(trainer_mod, "run_episode", bomb)
        with pytest.raises(RuntimeError, match="simulated crash"):
            train(cfg, tmp_path / "broken")
        monkeypatch.setattr(trainer_mod, "run_episode", real)

        train(cfg, tmp_path / "broken", resume=True)
        assert (tmp_path / "broken" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()
        events = read_events(tmp_path / "broken")
        assert any(e["event"] == "resume" and e["episode"] == 2 for e in events)
        stages = [e["stage"] for e in events if e["event"] == "episode"]
        assert stages == sorted(stages), "stage never reverts"

    def test_resume_needs_a_checkpoint(self, tmp_path):
        with pytest.raises(TrainerError, match="no checkpoint"):
            train(tiny_cfg(), tmp_path / "nothing", resume=True)

    def test_resume_rejects_a_different_config(self, tmp_path):
        cfg = tiny_cfg()
        train(cfg, tmp_path / "run")
        with pytest.raises(TrainerError, match="different config"):
            train(tiny_cfg(seed=1), tmp_path / "run", resume=True)

    def test_completed_run_resumes_to_a_noop(self, tmp_path):
        cfg = tiny_cfg()
        train(cfg, tmp_path / "run")
        before = (tmp_path / "run" / "metrics.csv").read_bytes()
        train(cfg, tmp_path / "run", resume=True)
        assert (tmp_path / "run" / "metrics.csv").read_bytes() == before

    def test_stage1_events_show_zero_competitor_sims(self, tmp_path):
        cfg = tiny_cfg()
        train(cfg, tmp_path / "run")
        events = [e for e in read_events(tmp_path / "run") if e["event"] == "episode"]
        for e in events:
            if e["stage"] == 1:
                assert set(e["competitor_sims"]) == {0}
            else:
                assert min(e["competitor_sims"]) > 0
            assert min(e["learner_sims"]) > 0

    def test_arena_updates_only_on_positive_sums(self, tmp_path):
        cfg = tiny_cfg(total_episodes=6, stage_switch=3, arena_interval=1)
        train(cfg, tmp_path / "run")
        arenas = [e for e in read_events(tmp_path / "run") if e["event"] == "arena"]
        assert len(arenas) == 6
        for e in arenas:
            assert e["updated"] == (e["reward_sum"] > 0.0)

    def test_evrp_smoke_writes_soc(self, tmp_path):
        cfg = tiny_cfg(
            problem="dm-evrp",
            n_customers=3,
            n_stations=1,
            total_episodes=2,
            stage_switch=1,
            planner=PlannerConfig(n_simulations=8, m_root=4),
            net=NetConfig(problem="evrp", **TINY_NET),
            arena_interval=2,
            checkpoint_interval=2,
        )
        train(cfg, tmp_path / "run")
        rows = read_metrics(tmp_path / "run")
        assert len(rows) == 2
        assert all(float(r[7]) > 0.0 for r in rows), "energy per customer is recorded"

    def test_zero_train_steps_allowed(self, tmp_path):
        cfg = tiny_cfg(total_episodes=2, stage_switch=1, train_steps_per_episode=0)
        train(cfg, tmp_path / "run")
        rows = read_metrics(tmp_path / "run")
        assert all(r[5] == "0.0" and r[6] == "0.0" for r in rows)
