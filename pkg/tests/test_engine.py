import os

import numpy as np
import pytest

from MetaHal import Engine
from MetaHal import Errors
from MetaHal.Engine import Counters, Episode, Pairs
from MetaHal.Losses import LossWeights, ScheduleConfig, ramp_weight, seg_loss, weights_at
from MetaHal.Nets import init_hallucinator, init_segmenter, segment
from MetaHal.Optim import Adam
from MetaHal.Teacher import ema_init
from MetaHal.Tensor import Tape, Tensor, backward, no_grad, precision

from conftest import small_trainer

@pytest.fixture
def full_data(bench):
    return Engine.training_data(bench, 'full')

def nets(cfg, seed=0):
    rng = np.random.default_rng(seed)
    seg = init_segmenter(rng, depth=cfg.depth, base=cfg.base_channels)
    hal = init_hallucinator(rng, kind=cfg.transform_kind)
    return seg, hal, ema_init(seg)

class TestSampleEpisode:
    def test_disjoint_fixed_halves_with_small_pool(self, full_data):
        cfg = small_trainer()
        for seed in range(10):
            episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(seed))
            assert len(episode.train) == cfg.n_train_pairs and len(episode.test) == cfg.n_test_pairs
            assert not set(episode.train.fixed_ids) & set(episode.test.fixed_ids)

    def test_disjoint_without_replacement_when_pool_allows(self, full_data):
        cfg = small_trainer(n_train_pairs=2, n_test_pairs=2, augmented_batch=2)
        episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(0))
        ids = list(episode.train.fixed_ids) + list(episode.test.fixed_ids)
        assert len(set(ids)) == 4

    def test_single_labeled_item_repeats(self, full_data):
        data = Engine.TrainingData(full_data.labeled.subset([0]), full_data.fixed, full_data.unlabeled,
                                   full_data.test, full_data.test_labels)
        episode = Engine.sample_episode(data, small_trainer(labeled_batch=8), np.random.default_rng(0))
        assert list(episode.labeled_ids) == [0] * 8
        assert episode.labeled_images.shape[0] == 8

    def test_unlabeled_batch_without_replacement(self, full_data):
        episode = Engine.sample_episode(full_data, small_trainer(unlabeled_batch=4), np.random.default_rng(1))
        assert len(set(episode.unlabeled_ids)) == 4

    def test_same_seed_same_episode(self, full_data):
        cfg = small_trainer()
        a = Engine.sample_episode(full_data, cfg, np.random.default_rng(3))
        b = Engine.sample_episode(full_data, cfg, np.random.default_rng(3))
        np.testing.assert_array_equal(a.train.moving, b.train.moving)
        np.testing.assert_array_equal(a.test.fixed_ids, b.test.fixed_ids)
        np.testing.assert_array_equal(a.unlabeled_images, b.unlabeled_images)

    def test_empty_labeled_set(self, full_data):
        data = Engine.TrainingData(full_data.labeled.subset([]), full_data.fixed, full_data.unlabeled,
                                   full_data.test, full_data.test_labels)
        with pytest.raises(Errors.ConfigError):
            Engine.sample_episode(data, small_trainer(), np.random.default_rng(0))

    def test_adapting_mode_needs_target(self, bench):
        data = Engine.training_data(bench, 'no_adapt')
        with pytest.raises(Errors.ConfigError):
            Engine.sample_episode(data, small_trainer('mt'), np.random.default_rng(0))

    def test_labels_follow_rotation(self, full_data):
        episode = Engine.sample_episode(full_data, small_trainer(rotation_degrees=10.0), np.random.default_rng(0))
        assert episode.labeled_labels.dtype == np.uint8
        assert set(np.unique(episode.labeled_labels)) <= {0, 1, 2, 3, 4}

class TestRotateBatch:
    def test_zero_degrees_is_identity(self, rng):
        images = rng.uniform(size=(2, 1, 8, 8))
        labels = rng.integers(0, 5, size=(2, 8, 8))
        out, out_labels = Engine.rotate_batch(images, labels, rng, 0.0)
        np.testing.assert_array_equal(out, images)
        np.testing.assert_array_equal(out_labels, labels)

    def test_rotation_changes_images(self, rng):
        images = rng.uniform(size=(2, 1, 8, 8)).astype(np.float32)
        out, _ = Engine.rotate_batch(images, None, rng, 10.0)
        assert out.shape == images.shape
        assert not np.array_equal(out, images)

class TestInnerUpdate:
    def test_zero_step_keeps_parameters(self, full_data):
        cfg = small_trainer()
        seg, hal, _ = nets(cfg)
        episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(0))
        result = Engine.inner_update(seg, hal, episode, 0.0, LossWeights(1.0, 1.0), cfg)
        for key in seg.keys():
            np.testing.assert_array_equal(result.seg.array(key), seg.array(key))
        for key in hal.keys():
            np.testing.assert_array_equal(result.hal.array(key), hal.array(key))

    def test_identity_hallucinator_matches_raw_augmentation(self, full_data):
        cfg_full, cfg_meta_seg = small_trainer('full'), small_trainer('meta_seg')
        seg, hal, _ = nets(cfg_full)
        episode = Engine.sample_episode(full_data, cfg_full, np.random.default_rng(0))
        weights = LossWeights(0.0, 0.0)
        _, full_parts = Engine.meta_train_loss(seg, hal, episode, weights, cfg_full, Counters())
        _, plain_parts = Engine.meta_train_loss(seg, hal, episode, weights, cfg_meta_seg, Counters())
        assert full_parts['L_seg'] == pytest.approx(plain_parts['L_seg'], abs=1e-6)

    def test_seg_loss_reaches_hallucinator(self, full_data):
        cfg = small_trainer()
        seg, hal, _ = nets(cfg)
        episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(0))
        result = Engine.inner_update(seg, hal, episode, 0.001, LossWeights(0.0, 0.0), cfg)
        assert sum(np.abs(g).sum() for g in result.hal_grads.values()) > 0

    def test_negative_step_rejected(self, full_data):
        cfg = small_trainer()
        seg, hal, _ = nets(cfg)
        episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(0))
        with pytest.raises(Errors.ConfigError):
            Engine.inner_update(seg, hal, episode, -1.0, LossWeights(), cfg)

class TestMetaTest:
    def test_unweighted_loss_is_plain_seg_loss(self, full_data):
        cfg = small_trainer('meta_seg', noise_sigma=0.0)
        seg, _, teacher = nets(cfg)
        episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(0))
        value = Engine.meta_test_eval(seg, None, teacher, episode, LossWeights(0.0, 0.0), cfg)
        pairs = episode.test
        aug = min(cfg.augmented_batch, len(pairs))
        with no_grad():
            images = np.concatenate([pairs.moving, pairs.moving[:aug]])
            labels = np.concatenate([pairs.labels, pairs.labels[:aug]])
            expected = float(seg_loss(segment(seg, Tensor(images)), labels).data)
        assert value == pytest.approx(expected, rel=1e-6)

    def test_consistency_vanishes_for_identical_branches(self, full_data):
        cfg = small_trainer('full', noise_sigma=0.0)
        seg, hal, teacher = nets(cfg)
        episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(0))
        with no_grad():
            _, parts = Engine.meta_test_loss(seg, hal, teacher, episode, LossWeights(1.0, 1.0), cfg, Counters())
        assert parts['L_con'] < 1e-10

    def test_split_sensitivity(self, full_data):
        cfg = small_trainer('full', noise_sigma=0.0)
        seg, hal, teacher = nets(cfg)
        episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(0))
        swapped = Episode(episode.test, episode.train, episode.labeled_images, episode.labeled_labels,
                          episode.labeled_ids, episode.unlabeled_images, episode.unlabeled_ids)
        weights = LossWeights(1.0, 1.0)
        assert (Engine.meta_test_eval(seg, hal, teacher, episode, weights, cfg)
                != Engine.meta_test_eval(seg, hal, teacher, swapped, weights, cfg))

class TestAblationGating:
    def step(self, data, mode, seed=0):
        cfg = small_trainer(mode)
        seg, hal, teacher = nets(cfg, seed)
        episode = Engine.sample_episode(data, cfg, np.random.default_rng(seed))
        counters = Counters()
        if cfg.terms.episodic:
            result = Engine.meta_step(seg, hal, teacher, episode, 1.0, cfg, Adam(), counters, np.random.default_rng(1))
        else:
            result = Engine.plain_step(seg, teacher, episode, 1.0, cfg, Adam(), counters, np.random.default_rng(1))
        return result, counters, hal

    def test_mt_never_builds_a_transform(self, full_data):
        _, counters, _ = self.step(full_data, 'mt')
        assert counters['hallucinate'] == 0 and counters['trans_loss'] == 0
        assert counters['con_loss'] > 0

    def test_meta_seg_freezes_hallucinator(self, full_data):
        result, counters, hal = self.step(full_data, 'meta_seg')
        assert result.hal is hal
        assert counters['trans_loss'] == 0 and counters['hallucinate'] == 0

    def test_meta_hal_skips_warped_consistency(self, full_data):
        result, counters, hal = self.step(full_data, 'meta_hal')
        assert counters['trans_loss'] > 0 and counters['warped_consistency'] == 0
        assert not np.array_equal(result.hal.array('head.bias'), hal.array('head.bias'))

    def test_full_runs_every_term(self, full_data):
        _, counters, _ = self.step(full_data, 'full')
        for name in ('hallucinate', 'trans_loss', 'con_loss', 'warped_consistency', 'seg_loss'):
            assert counters[name] > 0

    def test_no_adapt_touches_no_target_data(self, bench):
        _, counters, _ = self.step(Engine.training_data(bench, 'no_adapt'), 'no_adapt')
        assert counters['target_losses'] == 0 and counters['seg_loss'] > 0

class TestMetaStep:
    def test_descends_on_a_frozen_episode(self, full_data):
        improved = 0
        for seed in range(10):
            cfg = small_trainer('full', noise_sigma=0.0, schedule=ScheduleConfig(horizon=2, warmup_epochs=0,
                                                                                 peak_lr=1e-3))
            seg, hal, teacher = nets(cfg, seed)
            episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(seed))
            weights = weights_at(1.0, cfg.schedule)
            alpha = cfg.schedule.inner_lr
            _, _, before = Engine.meta_gradients(seg, hal, teacher, episode, weights, alpha, cfg, Counters())
            result = Engine.meta_step(seg, hal, teacher, episode, 1.0, cfg, Adam())
            _, _, after = Engine.meta_gradients(result.seg, result.hal, teacher, episode, weights, alpha, cfg,
                                                Counters())
            total = lambda s: s['L_meta_train'] + s['L_meta_test']
            improved += total(after) < total(before)
        assert improved >= 8

    def test_divergence_guard(self, full_data):
        cfg = small_trainer('full', divergence_threshold=1e-9)
        seg, hal, teacher = nets(cfg)
        episode = Engine.sample_episode(full_data, cfg, np.random.default_rng(0))
        with pytest.raises(Errors.NumericalError):
            Engine.meta_step(seg, hal, teacher, episode, 1.0, cfg, Adam())

def tiny_episode(rng, n_train=2, n_test=2, size=8):
    def pairs(n):
        labels = rng.integers(0, 5, size=(n, size, size)).astype(np.uint8)
        return Pairs(rng.standard_normal((n, 1, size, size)), labels, rng.standard_normal((n, 1, size, size)),
                     np.arange(n), np.arange(n))
    return Episode(pairs(n_train), pairs(n_test), rng.standard_normal((1, 1, size, size)),
                   rng.integers(0, 5, size=(1, size, size)).astype(np.uint8), np.arange(1),
                   rng.standard_normal((1, 1, size, size)), np.arange(1))

def test_second_order_meta_gradient_matches_finite_differences():
    with precision(64):
        rng = np.random.default_rng(7)
        cfg = small_trainer('meta_seg', depth=1, base_channels=2, second_order=True, hvp_eps=1e-5, noise_sigma=0.0,
                            n_train_pairs=2, n_test_pairs=2, labeled_batch=1, augmented_batch=1)
        seg = init_segmenter(rng, depth=1, base=2)
        teacher = ema_init(init_segmenter(rng, depth=1, base=2))
        episode = tiny_episode(rng)
        weights = LossWeights(1.0, 1.0)
        alpha = 0.5
        grads, _, _ = Engine.meta_gradients(seg, None, teacher, episode, weights, alpha, cfg, Counters())

        def objective(params):
            inner = Engine.inner_update(params, None, episode, alpha, weights, cfg)
            return inner.loss + Engine.meta_test_eval(inner.seg, None, teacher, episode, weights, cfg)

        eps = 1e-6
        for key in ('head.bias', 'head.weight'):
            flat = seg.array(key).reshape(-1)
            for index in range(min(3, flat.size)):
                delta = np.zeros_like(seg.array(key))
                delta.reshape(-1)[index] = eps
                plus = objective(seg.updated({key: -delta}))
                minus = objective(seg.updated({key: delta}))
                numeric = (plus - minus) / (2 * eps)
                analytic = grads[key].reshape(-1)[index]
                assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(numeric))

class TestTrainingData:
    def test_bounds_evaluate_on_raw_target(self, bench):
        assert Engine.training_data(bench, 'no_adapt').test.domain == 'target'
        supervised = Engine.training_data(bench, 'supervised_only')
        assert supervised.labeled.domain == 'target' and supervised.labeled.has_labels

    def test_adapting_modes_use_source_like(self, bench):
        data = Engine.training_data(bench, 'full')
        assert data.test.domain == 'source_like'
        assert len(data.unlabeled) == len(data.fixed) + len(bench.source_unlabeled)

    def test_split_seed_redraws_labeled_subjects(self, bench):
        a = Engine.training_data(bench, 'full', split_seed=0).labeled.subjects
        b = Engine.training_data(bench, 'full', split_seed=1).labeled.subjects
        assert set(a) != set(b)

class TestEpisodeStream:
    def test_prefetch_gives_the_same_episodes(self, full_data):
        cfg = small_trainer()
        chunks = [np.array([0, 1]), np.array([2, 3]), np.array([4, 5])]
        eager = list(Engine.EpisodeStream(full_data, cfg, np.random.default_rng(2), chunks))
        ahead = list(Engine.EpisodeStream(full_data, cfg, np.random.default_rng(2), chunks, prefetch=2))
        assert len(eager) == len(ahead) == 3
        for a, b in zip(eager, ahead):
            np.testing.assert_array_equal(a.train.moving, b.train.moving)
            np.testing.assert_array_equal(a.unlabeled_ids, b.unlabeled_ids)

    def test_worker_errors_reach_the_consumer(self, full_data):
        chunks = [np.array([999])]
        with pytest.raises(IndexError):
            list(Engine.EpisodeStream(full_data, small_trainer(), np.random.default_rng(0), chunks, prefetch=1))

    def test_backward_while_prefetching_records_every_step(self, full_data):
        cfg = small_trainer()
        seg = init_segmenter(np.random.default_rng(0), depth=cfg.depth, base=cfg.base_channels)
        chunks = [np.array([i % 6]) for i in range(12)]
        for episode in Engine.EpisodeStream(full_data, cfg, np.random.default_rng(3), chunks, prefetch=4):
            leaves = seg.leaves()
            with Tape():
                loss = seg_loss(segment(leaves, Tensor(episode.labeled_images)), episode.labeled_labels)
                assert loss.requires_grad
                backward(loss)
            assert sum(float(np.abs(g).sum()) for g in leaves.grads().values()) > 0.0

    def test_abandoned_stream_stops_its_worker(self, full_data):
        chunks = [np.array([i % 6]) for i in range(20)]
        stream = Engine.EpisodeStream(full_data, small_trainer(), np.random.default_rng(0), chunks, prefetch=1)
        with pytest.raises(Errors.NumericalError):
            with stream:
                for _ in stream:
                    raise Errors.NumericalError('Non-finite loss')
        assert not stream.worker.is_alive()

class TestTrainer:
    def test_run_directory_contents(self, bench, tmp_path, logger):
        cfg = small_trainer('full')
        trainer = Engine.Trainer(cfg, Engine.training_data(bench, 'full'), str(tmp_path), logger)
        student, teacher = trainer.train()
        assert student.model == 'student' and teacher.model == 'teacher'
        for name in ('log.csv', 'report.json', 'report_teacher.json', 'report.csv', 'report.txt', 'counters.json'):
            assert (tmp_path / name).exists()
        for name in ('epoch_001', 'epoch_002', 'last'):
            assert (tmp_path / 'checkpoints' / name / 'state.json').exists()
        assert (tmp_path / 'checkpoints' / 'last' / 'hallucinator.ckpt').exists()
        rows = (tmp_path / 'log.csv').read_text().strip().splitlines()
        assert len(rows) == 3
        last = dict(zip(rows[0].split(','), rows[-1].split(',')))
        assert float(last['lambda_con']) == ramp_weight(2, cfg.schedule) == 10.0

    def test_resume_reproduces_the_next_epoch(self, bench, tmp_path, logger):
        data = Engine.training_data(bench, 'full')
        straight = tmp_path / 'straight'
        Engine.Trainer(small_trainer('full'), data, str(straight), logger).train()
        resumed = tmp_path / 'resumed'
        Engine.Trainer(small_trainer('full', epochs=1), data, str(resumed), logger).train()
        Engine.Trainer(small_trainer('full'), data, str(resumed), logger).train(resume=True)
        assert (resumed / 'log.csv').read_text() == (straight / 'log.csv').read_text()
        assert (resumed / 'report.json').read_text() == (straight / 'report.json').read_text()

    def test_identical_seeds_identical_logs(self, bench, tmp_path, logger):
        data = Engine.training_data(bench, 'mt')
        for name in ('a', 'b'):
            Engine.Trainer(small_trainer('mt', epochs=1), data, str(tmp_path / name), logger).train()
        assert (tmp_path / 'a' / 'log.csv').read_text() == (tmp_path / 'b' / 'log.csv').read_text()

    def test_abort_keeps_diagnostics(self, bench, tmp_path, logger):
        cfg = small_trainer('meta_seg', divergence_threshold=1e-9)
        trainer = Engine.Trainer(cfg, Engine.training_data(bench, 'meta_seg'), str(tmp_path), logger)
        with pytest.raises(Errors.NumericalError):
            trainer.train()
        assert (tmp_path / 'abort.json').exists()
        assert not os.path.exists(tmp_path / 'report.json')

    def test_resume_rejects_other_mode(self, bench, tmp_path, logger):
        Engine.Trainer(small_trainer('mt', epochs=1), Engine.training_data(bench, 'mt'), str(tmp_path), logger).train()
        other = Engine.Trainer(small_trainer('meta_seg'), Engine.training_data(bench, 'meta_seg'), str(tmp_path), logger)
        with pytest.raises(Errors.CheckpointError):
            other.train(resume=True)

class TestConfigValidation:
    def test_unknown_mode(self):
        with pytest.raises(Errors.ConfigError):
            Engine.TrainerConfig(mode='everything')

    def test_augmented_batch_bounded_by_pairs(self):
        with pytest.raises(Errors.ConfigError):
            Engine.TrainerConfig(n_train_pairs=4, augmented_batch=8)
