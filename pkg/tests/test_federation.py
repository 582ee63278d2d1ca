import math
import tempfile
from dataclasses import replace, asdict
from pathlib import Path
import numpy as np
from django.test import SimpleTestCase
from fedvfda.federation import (
    FedConfig,
    Client,
    Federation,
    RoundLog,
    learning_rate,
    aggregate_weights,
    global_stat_variance,
    global_variances,
    client_local_round,
    run_federation,
)
from fedvfda.messages import ClientUpdate, GlobalBroadcast
from fedvfda.segnet import NetworkConfig, build_network
from fedvfda.synthdata import VolumeSample, make_partition, generate_shard
from fedvfda.transport import load_transport
from fedvfda.vfda import PrototypeVariance
from fedvfda.streams import get_stream
from fedvfda.errors import FederationError, ShapeError


NETWORK = NetworkConfig(encoder_channels=(2, 3, 4))


def make_shards(num_clients, samples=2, seed=0, heterogeneity=0.8):
    rng = get_stream(seed, "data")
    shifts = make_partition(
        num_clients, heterogeneity, rng, volume_size=8, samples=samples
    )
    return [generate_shard(shift, 8, 2, rng) for shift in shifts]


def make_config(num_clients, **kwargs):
    kwargs.setdefault("rounds", 2)
    kwargs.setdefault("lr0", 1e-2)
    return FedConfig(num_clients=num_clients, **kwargs)


def initial_broadcast(seed=0):
    net = build_network(NETWORK, get_stream(seed, "init"), ())
    return GlobalBroadcast(
        round=1,
        params=net.flatten(),
        variances=[PrototypeVariance.zeros(c) for c in NETWORK.encoder_channels],
    )


def update(client_id, params, sample_count=1):
    return ClientUpdate(
        client_id=client_id,
        sample_count=sample_count,
        params=np.asarray(params, dtype=float),
        stats=[],
    )


class AggregationTestSuite(SimpleTestCase):
    def test_unweighted_mean(self):
        aggregated = aggregate_weights([update(0, [1.0]), update(1, [3.0])])
        self.assertEqual(aggregated[0], 2.0)

    def test_weighted_mean(self):
        aggregated = aggregate_weights([update(0, [0.0], 1), update(1, [4.0], 3)])
        self.assertEqual(aggregated[0], 3.0)

    def test_single_client(self):
        params = np.random.default_rng(0).normal(size=50)
        np.testing.assert_array_equal(aggregate_weights([update(4, params, 7)]), params)

    def test_order_independence(self):
        rng = np.random.default_rng(1)
        updates = [
            update(i, rng.normal(size=100), int(rng.integers(1, 10))) for i in range(6)
        ]
        expected = aggregate_weights(updates)
        for _ in range(5):
            shuffled = [updates[i] for i in rng.permutation(len(updates))]
            np.testing.assert_array_equal(aggregate_weights(shuffled), expected)

    def test_weighted_mean_oracle(self):
        rng = np.random.default_rng(2)
        updates = [
            update(i, rng.normal(size=20), int(rng.integers(1, 10))) for i in range(5)
        ]
        counts = np.array([u.sample_count for u in updates], dtype=float)
        stacked = np.stack([u.params for u in updates])
        np.testing.assert_allclose(
            aggregate_weights(updates), counts @ stacked / counts.sum(), rtol=1e-12
        )

    def test_errors(self):
        with self.assertRaises(FederationError):
            aggregate_weights([])
        with self.assertRaises(FederationError):
            aggregate_weights([update(0, [1.0]), update(1, [1.0, 2.0])])
        with self.assertRaises(FederationError):
            aggregate_weights([update(0, [1.0], 0)])


class GlobalVarianceTestSuite(SimpleTestCase):
    def test_two_clients(self):
        variance = global_stat_variance(
            np.array([[1.0], [3.0]]), np.array([[1.0], [1.0]])
        )
        self.assertEqual(variance.var_mu[0], 1.0)
        self.assertEqual(variance.var_sigma[0], 0.0)

    def test_single_client(self):
        variance = global_stat_variance(np.array([[1.0, 2.0]]), np.array([[0.5, 0.7]]))
        np.testing.assert_array_equal(variance.var_mu, [0.0, 0.0])
        np.testing.assert_array_equal(variance.var_sigma, [0.0, 0.0])

    def test_identical_clients(self):
        rows = np.tile(np.array([[0.3, -1.2, 4.0]]), (4, 1))
        variance = global_stat_variance(rows, rows)
        np.testing.assert_array_equal(variance.var_mu, np.zeros(3))

    def test_population_variance_oracle(self):
        rng = np.random.default_rng(3)
        mu_bars, sigma_bars = rng.normal(size=(5, 4)), rng.uniform(size=(5, 4))
        variance = global_stat_variance(mu_bars, sigma_bars)
        for c in range(4):
            column = mu_bars[:, c]
            expected = sum((v - column.mean()) ** 2 for v in column) / 5
            self.assertAlmostEqual(variance.var_mu[c], expected, delta=1e-12)

    def test_per_layer(self):
        updates = [
            ClientUpdate(
                0,
                1,
                np.zeros(1),
                [(np.array([1.0, 0.0]), np.ones(2)), (np.zeros(3), np.ones(3))],
            ),
            ClientUpdate(
                1,
                1,
                np.zeros(1),
                [(np.array([3.0, 0.0]), np.ones(2)), (np.zeros(3), np.ones(3))],
            ),
        ]
        variances = global_variances(updates)
        self.assertEqual(len(variances), 2)
        np.testing.assert_array_equal(variances[0].var_mu, [1.0, 0.0])
        np.testing.assert_array_equal(variances[1].var_sigma, np.zeros(3))

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            global_stat_variance(np.zeros((2, 3)), np.zeros((2, 4)))
        updates = [
            ClientUpdate(0, 1, np.zeros(1), [(np.zeros(2), np.zeros(2))]),
            ClientUpdate(1, 1, np.zeros(1), [(np.zeros(3), np.zeros(3))]),
        ]
        with self.assertRaises(ShapeError):
            global_variances(updates)


class LearningRateTestSuite(SimpleTestCase):
    def test_schedule(self):
        self.assertEqual(learning_rate(5e-4, 1, 20), 5e-4)
        self.assertAlmostEqual(learning_rate(1.0, 11, 20), 0.5**0.9, places=12)
        rates = [learning_rate(1.0, r, 20) for r in range(1, 21)]
        self.assertTrue(all(a > b > 0 for a, b in zip(rates, rates[1:])))


class ClientTestSuite(SimpleTestCase):
    def setUp(self):
        self.shard = make_shards(1, samples=3)[0]

    def test_zero_epochs(self):
        client = Client(0, self.shard, NETWORK, make_config(1, local_epochs=0), seed=0)
        broadcast = initial_broadcast()
        result_update, result = client_local_round(client, broadcast)
        np.testing.assert_array_equal(result_update.params, broadcast.params)
        self.assertEqual(result.steps, 0)
        self.assertTrue(math.isnan(result.loss_ce))

    def test_determinism(self):
        updates = []
        for _ in range(2):
            client = Client(0, self.shard, NETWORK, make_config(1), seed=5)
            updates.append(client_local_round(client, initial_broadcast())[0])
        np.testing.assert_array_equal(updates[0].params, updates[1].params)
        for (mu_a, sigma_a), (mu_b, sigma_b) in zip(updates[0].stats, updates[1].stats):
            np.testing.assert_array_equal(mu_a, mu_b)
            np.testing.assert_array_equal(sigma_a, sigma_b)

    def test_trains(self):
        client = Client(0, self.shard, NETWORK, make_config(1), seed=0)
        broadcast = initial_broadcast()
        result_update, result = client_local_round(client, broadcast)
        self.assertFalse(np.array_equal(result_update.params, broadcast.params))
        self.assertEqual(result.steps, 2)
        self.assertEqual(result_update.sample_count, 3)
        self.assertTrue(all(sigma.all() for _, sigma in result_update.stats))

    def test_no_vfda(self):
        client = Client(0, self.shard, NETWORK, make_config(1, no_vfda=True), seed=0)
        self.assertFalse(any(layer.state.enabled for layer in client.net.vfda_layers))
        result_update, _ = client_local_round(client, initial_broadcast())
        self.assertEqual(len(result_update.stats), NETWORK.levels)
        for mu_bar, sigma_bar in result_update.stats:
            self.assertFalse(mu_bar.any() or sigma_bar.any())

    def test_mixup_baseline(self):
        client = Client(
            0, self.shard, NETWORK, make_config(1, mixup_baseline=True), seed=0
        )
        self.assertFalse(any(layer.state.enabled for layer in client.net.vfda_layers))
        (batch,) = client.batches()[:1]
        self.assertEqual(batch.labels.ndim, 5)
        np.testing.assert_allclose(batch.labels.sum(axis=1), 1.0)

    def test_shard_left_unchanged(self):
        originals = [(s.volume.copy(), s.label.copy()) for s in self.shard]
        for sample in self.shard:
            sample.volume.setflags(write=False)
            sample.label.setflags(write=False)
        variances = [PrototypeVariance.ones(c) for c in NETWORK.encoder_channels]
        broadcast = replace(initial_broadcast(), variances=variances)
        for config in (make_config(1), make_config(1, mixup_baseline=True)):
            client = Client(0, self.shard, NETWORK, config, seed=0)
            client_local_round(client, broadcast)
        for sample, (volume, label) in zip(self.shard, originals):
            np.testing.assert_array_equal(sample.volume, volume)
            np.testing.assert_array_equal(sample.label, label)
            self.assertEqual(sample.label.dtype, label.dtype)

    def test_vfda_levels(self):
        client = Client(
            0, self.shard, NETWORK, make_config(1, vfda_levels=(2,)), seed=0
        )
        self.assertEqual(
            [layer.state.enabled for layer in client.net.vfda_layers],
            [False, False, True],
        )
        result_update, _ = client_local_round(client, initial_broadcast())
        self.assertFalse(result_update.stats[0][0].any())
        self.assertTrue(result_update.stats[2][1].all())

    def test_round_mismatch(self):
        client = Client(0, self.shard, NETWORK, make_config(1), seed=0)
        with self.assertRaises(FederationError):
            client_local_round(client, replace(initial_broadcast(), round=2))

    def test_variance_layer_mismatch(self):
        client = Client(0, self.shard, NETWORK, make_config(1), seed=0)
        with self.assertRaises(ShapeError):
            client_local_round(client, replace(initial_broadcast(), variances=[]))

    def test_empty_shard(self):
        with self.assertRaises(FederationError):
            Client(0, [], NETWORK, make_config(1), seed=0)


class FederationTestSuite(SimpleTestCase):
    def test_round_logs(self):
        calls = []

        def evaluator(net):
            calls.append(net.flatten().copy())
            return [0.5]

        history, net = run_federation(
            make_config(2), NETWORK, make_shards(2), seed=0, evaluator=evaluator
        )
        self.assertEqual([r.round for r in history], [1, 2])
        self.assertEqual([c.client_id for c in history[0].clients], [0, 1])
        self.assertEqual(history[1].dice, [0.5])
        np.testing.assert_array_equal(calls[-1], net.flatten())

    def test_first_round_variances_zero(self):
        with Federation(make_config(2), NETWORK, make_shards(2), seed=0) as federation:
            for variance in federation.variances:
                self.assertFalse(variance.var_mu.any() or variance.var_sigma.any())
            federation.run_round()
            self.assertTrue(
                any(variance.var_mu.any() for variance in federation.variances)
            )

    def test_single_client_is_local_sgd(self):
        shards = make_shards(1, samples=3)
        config = make_config(1, rounds=3)
        with Federation(config, NETWORK, shards, seed=0) as federation:
            for _ in range(3):
                federation.run_round()
                for variance in federation.variances:
                    self.assertFalse(variance.var_mu.any() or variance.var_sigma.any())
            federated = federation.params
        client = Client(0, shards[0], NETWORK, config, seed=0)
        broadcast = initial_broadcast()
        for round_ in range(1, 4):
            local_update, _ = client_local_round(client, broadcast)
            broadcast = replace(broadcast, round=round_ + 1, params=local_update.params)
        np.testing.assert_array_equal(federated, broadcast.params)

    def test_determinism(self):
        results = [
            run_federation(
                make_config(2), NETWORK, make_shards(2), seed=3, concurrency=concurrency
            )
            for concurrency in (1, 2)
        ]
        np.testing.assert_array_equal(results[0][1].flatten(), results[1][1].flatten())
        losses = [
            [(c.loss_ce, c.loss_dice) for r in history for c in r.clients]
            for history, _ in results
        ]
        self.assertEqual(losses[0], losses[1])

    def test_spool_matches_loopback(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            spool = load_transport(
                {"ENGINE": "fedvfda.transports.spool", "DIRECTORY": tmpdir}
            )
            _, spooled = run_federation(
                make_config(2), NETWORK, make_shards(2), seed=0, transport=spool
            )
        _, looped = run_federation(make_config(2), NETWORK, make_shards(2), seed=0)
        np.testing.assert_array_equal(spooled.flatten(), looped.flatten())

    def test_resume(self):
        config = make_config(2, rounds=3)
        history, uninterrupted = run_federation(config, NETWORK, make_shards(2), seed=1)
        with tempfile.TemporaryDirectory() as tmpdir:
            checkpoint = Path(tmpdir) / "checkpoint.npz"
            for _ in range(3):
                resumed_history, resumed = run_federation(
                    config,
                    NETWORK,
                    make_shards(2),
                    seed=1,
                    checkpoint_path=checkpoint,
                    resume=checkpoint.is_file(),
                    max_rounds=1,
                )
        np.testing.assert_array_equal(resumed.flatten(), uninterrupted.flatten())
        self.assertEqual(
            [[(c.loss_ce, c.loss_dice) for c in r.clients] for r in resumed_history],
            [[(c.loss_ce, c.loss_dice) for c in r.clients] for r in history],
        )

    def test_resume_errors(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            checkpoint = Path(tmpdir) / "checkpoint.npz"
            with self.assertRaises(FederationError):
                run_federation(
                    make_config(2),
                    NETWORK,
                    make_shards(2),
                    seed=0,
                    checkpoint_path=checkpoint,
                    resume=True,
                )
            run_federation(
                make_config(2),
                NETWORK,
                make_shards(2),
                seed=0,
                checkpoint_path=checkpoint,
                max_rounds=1,
            )
            with self.assertRaises(FederationError):
                run_federation(
                    make_config(2),
                    NETWORK,
                    make_shards(2),
                    seed=9,
                    checkpoint_path=checkpoint,
                    resume=True,
                )
            for changed in (
                make_config(2, rounds=5),
                make_config(2, no_emd=True),
                make_config(2, lr0=0.5),
            ):
                with self.assertRaises(FederationError) as context:
                    run_federation(
                        changed,
                        NETWORK,
                        make_shards(2),
                        seed=0,
                        checkpoint_path=checkpoint,
                        resume=True,
                    )
                self.assertIn("different settings", str(context.exception))
            with self.assertRaises(FederationError) as context:
                run_federation(
                    make_config(2, rounds=4),
                    NETWORK,
                    make_shards(2),
                    seed=0,
                    checkpoint_path=checkpoint,
                    resume=True,
                )
            self.assertIn("rounds", str(context.exception))
            checkpoint.write_bytes(b"corrupt")
            with self.assertRaises(FederationError):
                run_federation(
                    make_config(2),
                    NETWORK,
                    make_shards(2),
                    seed=0,
                    checkpoint_path=checkpoint,
                    resume=True,
                )

    def test_round_log_from_dict(self):
        history, _ = run_federation(
            make_config(1, rounds=1), NETWORK, make_shards(1), seed=0
        )
        self.assertEqual(RoundLog.from_dict(asdict(history[0])), history[0])

    def test_client_failure_aborts_round(self):
        shards = make_shards(2)
        shards[1] = [
            VolumeSample(
                volume=np.zeros((1, 1, 6, 6, 6)),
                label=np.zeros((6, 6, 6), dtype=np.uint8),
            )
        ]
        with self.assertLogs("main", level="ERROR"):
            with self.assertRaises(FederationError) as context:
                run_federation(make_config(2), NETWORK, shards, seed=0)
        self.assertIn("client 1", str(context.exception))

    def test_invalid_setup(self):
        with self.assertRaises(FederationError):
            Federation(make_config(3), NETWORK, make_shards(2), seed=0)
        with self.assertRaises(FederationError):
            Federation(make_config(2), NETWORK, make_shards(2), seed=0, concurrency=0)
        with self.assertRaises(FederationError):
            Federation(make_config(2, eta0=-1.0), NETWORK, make_shards(2), seed=0)
