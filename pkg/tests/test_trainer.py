import numpy as np
import pytest

from factorcast import autodiff as ad
from factorcast.importance import ImportanceMap
from factorcast.targets import TASK_ORDER, TaskDataset, TaskId
from factorcast.trainer import (ConsolidationState, TaskRecord, TrainConfig,
                                consolidation_penalty, train, train_task)
from helpers import TinyModel


def two_task_data(rng, n=32, in_dim=3, conflict=0.3):
    x = rng.standard_normal((n, in_dim))
    a = rng.standard_normal((in_dim, 1))
    b = -a + conflict * rng.standard_normal((in_dim, 1))
    return x, x @ a, x @ b


def manual_state(model, lam1, lam2, omega_value=1.0):
    omega = {n: np.full_like(p.data, omega_value) for n, p in model.store.items()}
    state = ConsolidationState(lam1, lam2)
    state.records[TaskId.MA] = TaskRecord(model.store.snapshot(),
                                          ImportanceMap(TaskId.MA, omega))
    return state


class TestConsolidationPenalty:
    def test_zero_at_stored_optima(self):
        rng = np.random.default_rng(0)
        model = TinyModel(rng)
        state = manual_state(model, 1.0, 1.0)
        assert consolidation_penalty(model.store, state).item() == 0.0

    def test_zero_lambdas_zero_penalty(self):
        rng = np.random.default_rng(1)
        model = TinyModel(rng)
        state = manual_state(model, 0.0, 0.0)
        model.theta.data += 5.0
        assert consolidation_penalty(model.store, state).item() == 0.0

    def test_zero_without_records(self):
        rng = np.random.default_rng(2)
        model = TinyModel(rng)
        state = ConsolidationState(1.0, 1.0)
        assert consolidation_penalty(model.store, state).item() == 0.0

    def test_direct_arithmetic_fifty_entries(self):
        # one stored task, omega all ones, lambda1=1, lambda2=0,
        # 50 theta entries each drifted by 0.1 -> penalty 50 * 0.01 * 1 = 0.5
        store = ad.ParamStore()
        store.add("theta/a", np.zeros((5, 10)))

        class Shell:
            pass

        model = Shell()
        model.store = store
        state = ConsolidationState(1.0, 0.0)
        state.records[TaskId.MA] = TaskRecord(
            store.snapshot(), ImportanceMap(TaskId.MA, {"theta/a": np.ones((5, 10))}))
        store["theta/a"].data += 0.1
        assert consolidation_penalty(store, state).item() == pytest.approx(0.5, abs=1e-12)

    def test_nonnegative_and_convex_direction(self):
        rng = np.random.default_rng(3)
        model = TinyModel(rng)
        state = manual_state(model, 0.7, 0.7)
        base = model.store.snapshot()
        values = []
        for step in (0.0, 0.1, 0.2):
            model.store.load(base)
            model.theta.data += step
            values.append(consolidation_penalty(model.store, state).item())
        assert values[0] == 0.0
        assert values[1] > 0
        # quadratic: doubling the drift quadruples the penalty
        assert values[2] == pytest.approx(4.0 * values[1], rel=1e-9)

    def test_shape_mismatch_errors(self):
        rng = np.random.default_rng(4)
        model = TinyModel(rng)
        state = manual_state(model, 1.0, 1.0)
        bad = state.records[TaskId.MA].params
        bad["theta/f"] = np.zeros((1, 1))
        state.records[TaskId.MA].omega.omega["theta/f"] = np.ones((1, 1))
        with pytest.raises(ad.ShapeError):
            consolidation_penalty(model.store, state)

    def test_restricted_task_selection(self):
        rng = np.random.default_rng(5)
        model = TinyModel(rng)
        state = manual_state(model, 1.0, 1.0)
        model.theta.data += 1.0
        assert consolidation_penalty(model.store, state, tasks=()).item() == 0.0
        assert consolidation_penalty(model.store, state, tasks=(TaskId.MA,)).item() > 0.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(6)
        model = TinyModel(rng)
        state = manual_state(model, 0.3, 0.2, omega_value=0.8)
        model.theta.data += 0.5
        model.store["w/pf/g"].data -= 0.25
        from helpers import assert_grad_matches_fd
        leaves = [model.store[n] for n in model.store.names()]
        assert_grad_matches_fd(lambda: consolidation_penalty(model.store, state), leaves)


class TestTrainTask:
    def test_first_task_has_no_penalty_term(self):
        rng = np.random.default_rng(7)
        model = TinyModel(rng)
        x, y1, _ = two_task_data(rng)
        cfg = TrainConfig(epochs=1, tasks=(TaskId.MA, TaskId.PF), inner_steps=1, seed=0)
        state = ConsolidationState(cfg.lambda1, cfg.lambda2)
        loss = train_task(model, TaskId.MA, x, y1, state, cfg, lr=0.01,
                          batch_index=0, prior_tasks=(), view_seed=[0])
        direct = TinyModel(np.random.default_rng(7))
        assert loss == pytest.approx(float(direct.task_loss(x, TaskId.MA, y1).data), abs=1e-12)
        assert TaskId.MA in state.records

    def test_stores_snapshot_and_importance(self):
        rng = np.random.default_rng(8)
        model = TinyModel(rng)
        x, y1, _ = two_task_data(rng)
        cfg = TrainConfig(epochs=1, tasks=(TaskId.MA, TaskId.PF), inner_steps=3, seed=0)
        state = ConsolidationState(cfg.lambda1, cfg.lambda2)
        train_task(model, TaskId.MA, x, y1, state, cfg, lr=0.01,
                   batch_index=0, view_seed=[1])
        record = state.records[TaskId.MA]
        for name, param in model.store.items():
            assert np.array_equal(record.params[name], param.data)
            assert record.omega.omega[name].shape == param.data.shape

    def test_loss_gradient_importance_used_without_mi(self):
        rng = np.random.default_rng(9)
        model = TinyModel(rng)
        x, y1, _ = two_task_data(rng)
        cfg = TrainConfig(epochs=1, tasks=(TaskId.MA, TaskId.PF), use_mi=False, seed=0)
        state = ConsolidationState(cfg.lambda1, cfg.lambda2)
        train_task(model, TaskId.MA, x, y1, state, cfg, lr=0.0, batch_index=0, view_seed=[2])
        # lr=0: params unmoved, so omega equals |grad L| at the init point
        from factorcast.importance import loss_gradient_importance
        fresh = TinyModel(np.random.default_rng(9))
        want = loss_gradient_importance(fresh, x, TaskId.MA, y1)
        got = state.records[TaskId.MA].omega
        assert np.allclose(got.omega["theta/f"], want.omega["theta/f"], atol=1e-12)

    def test_non_finite_loss_aborts_with_diagnostics(self):
        rng = np.random.default_rng(10)
        model = TinyModel(rng)
        model.theta.data[...] = 1e300
        x, y1, _ = two_task_data(rng)
        cfg = TrainConfig(epochs=1, tasks=(TaskId.MA, TaskId.PF), seed=0)
        state = ConsolidationState(cfg.lambda1, cfg.lambda2)
        with pytest.raises(RuntimeError, match=r"lr=0.01.*batch=3"):
            train_task(model, TaskId.MA, x, y1, state, cfg, lr=0.01,
                       batch_index=3, view_seed=[3])

    def test_stiff_penalty_pins_parameters(self):
        # lambda = 1e6 with unit importance: task-2 training cannot move
        # parameters away from the stored optimum
        rng = np.random.default_rng(11)
        model = TinyModel(rng)
        x, y1, y2 = two_task_data(rng)
        cfg = TrainConfig(epochs=1, tasks=(TaskId.MA, TaskId.PF),
                          lambda1=1e6, lambda2=1e6, inner_steps=4000, seed=0)
        lr = 5e-7
        state = manual_state(model, 1e6, 1e6)
        stored = {n: v.copy() for n, v in state.records[TaskId.MA].params.items()}
        train_task(model, TaskId.PF, x, y2, state, cfg, lr=lr, batch_index=0,
                   prior_tasks=(TaskId.MA,), view_seed=[4])
        for name, param in model.store.items():
            assert np.abs(param.data - stored[name]).max() < 1e-3, name

        # contrast: without the penalty the same schedule drifts well past 1e-3
        model2 = TinyModel(np.random.default_rng(11))
        state2 = manual_state(model2, 0.0, 0.0)
        cfg2 = TrainConfig(epochs=1, tasks=(TaskId.MA, TaskId.PF),
                           lambda1=0.0, lambda2=0.0, inner_steps=4000, seed=0)
        train_task(model2, TaskId.PF, x, y2, state2, cfg2, lr=lr, batch_index=0,
                   prior_tasks=(TaskId.MA,), view_seed=[4])
        drift = max(np.abs(p.data - stored[n]).max() for n, p in model2.store.items())
        assert drift > 1e-3


def retention_losses(seed, lam, steps=300, lr=0.05):
    """Task-1 loss after sequential task-1 then task-2 training."""
    rng = np.random.default_rng(seed)
    model = TinyModel(rng)
    x, y1, y2 = two_task_data(rng)
    cfg = TrainConfig(epochs=1, lr=lr, batch_size=32, lambda1=lam, lambda2=lam,
                      tasks=(TaskId.MA, TaskId.PF), use_mi=True, inner_steps=steps, seed=seed)
    state = ConsolidationState(lam, lam)
    train_task(model, TaskId.MA, x, y1, state, cfg, lr, 0, prior_tasks=(),
               view_seed=[seed, 1])
    train_task(model, TaskId.PF, x, y2, state, cfg, lr, 0, prior_tasks=(TaskId.MA,),
               view_seed=[seed, 2])
    return float(model.task_loss(x, TaskId.MA, y1).data)


class TestRetention:
    def test_small_penalty_reduces_forgetting_majority_of_seeds(self):
        wins = sum(retention_losses(seed, 1e-5) < retention_losses(seed, 0.0)
                   for seed in range(5))
        assert wins >= 4


class TestTrainLoop:
    def make_dataset(self, rng, n=48):
        x, y1, y2 = two_task_data(rng, n=n)
        return x, y1, y2, TaskDataset(np.arange(n), x, {TaskId.MA: y1, TaskId.PF: y2})

    def test_zero_epochs_leaves_parameters_unchanged(self):
        rng = np.random.default_rng(12)
        model = TinyModel(rng)
        before = model.store.snapshot()
        _, _, _, ds = self.make_dataset(np.random.default_rng(12))
        cfg = TrainConfig(epochs=0, tasks=(TaskId.MA, TaskId.PF), seed=0)
        state, log = train(model, ds, None, cfg)
        for name, value in before.items():
            assert np.array_equal(model.store[name].data, value)
        assert log.rows == []

    def test_same_seed_bitwise_identical(self):
        results = []
        for _ in range(2):
            rng = np.random.default_rng(13)
            model = TinyModel(rng)
            _, _, _, ds = self.make_dataset(np.random.default_rng(13))
            cfg = TrainConfig(epochs=3, lr=0.02, batch_size=16,
                              tasks=(TaskId.MA, TaskId.PF), seed=5)
            train(model, ds, ds, cfg)
            results.append(model.store.snapshot())
        for name in results[0]:
            assert np.array_equal(results[0][name], results[1][name])

    def test_single_task_ablation_keeps_other_heads_frozen(self):
        rng = np.random.default_rng(14)
        model = TinyModel(rng, tasks=TASK_ORDER)
        n = 24
        x = np.random.default_rng(15).standard_normal((n, 3))
        ds = TaskDataset(np.arange(n), x, {TaskId.PF: x @ np.ones((3, 1))})
        before = model.store.snapshot()
        cfg = TrainConfig(epochs=2, lr=0.05, batch_size=12, tasks=(TaskId.PF,), seed=0)
        state, _ = train(model, ds, None, cfg)
        for task in (TaskId.CPD, TaskId.GAP, TaskId.MA):
            for name in model.store.w_names(task.value):
                assert np.array_equal(model.store[name].data, before[name])
        assert not np.array_equal(model.store["w/pf/g"].data, before["w/pf/g"])
        assert set(state.records) == {TaskId.PF}

    def test_log_rows_per_epoch_and_task(self):
        rng = np.random.default_rng(16)
        model = TinyModel(rng)
        _, _, _, ds = self.make_dataset(np.random.default_rng(16))
        cfg = TrainConfig(epochs=2, tasks=(TaskId.MA, TaskId.PF), batch_size=16, seed=0)
        _, log = train(model, ds, ds, cfg)
        assert len(log.rows) == 4
        assert [r[0] for r in log.rows] == [0, 0, 1, 1]
        assert all(np.isfinite(r[2]) for r in log.rows)

    def test_log_csv_format(self, tmp_path):
        rng = np.random.default_rng(17)
        model = TinyModel(rng)
        _, _, _, ds = self.make_dataset(np.random.default_rng(17))
        cfg = TrainConfig(epochs=1, tasks=(TaskId.MA, TaskId.PF), seed=0)
        _, log = train(model, ds, None, cfg)
        path = tmp_path / "log.csv"
        log.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,task,train_loss,val_metric"
        assert len(lines) == 3

    def test_learning_rate_schedule(self):
        cfg = TrainConfig(lr=0.001, lr_decay=0.7, decay_every=5)
        assert cfg.learning_rate(0) == 0.001
        assert cfg.learning_rate(4) == 0.001
        assert cfg.learning_rate(5) == pytest.approx(0.0007)
        assert cfg.learning_rate(10) == pytest.approx(0.00049)

    def test_early_stop_halts(self):
        rng = np.random.default_rng(18)
        model = TinyModel(rng)
        _, _, _, ds = self.make_dataset(np.random.default_rng(18))
        cfg = TrainConfig(epochs=50, lr=0.0, tasks=(TaskId.MA, TaskId.PF),
                          early_stop=True, patience=3, seed=0)
        _, log = train(model, ds, ds, cfg)
        epochs_run = max(r[0] for r in log.rows) + 1
        assert epochs_run <= 5


class TestTrainConfigValidation:
    def test_pf_required(self):
        with pytest.raises(ValueError, match="forecasting"):
            TrainConfig(tasks=(TaskId.CPD, TaskId.MA))

    def test_order_enforced(self):
        with pytest.raises(ValueError, match="order"):
            TrainConfig(tasks=(TaskId.PF, TaskId.CPD))

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda1=-1.0)

    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 100
        assert cfg.lr == 0.001
        assert cfg.lr_decay == 0.7
        assert cfg.decay_every == 5
        assert cfg.lambda1 == 1e-5 and cfg.lambda2 == 1e-5
        assert cfg.tasks == TASK_ORDER
