"""
Unit tests for the neural building blocks.
"""

import pytest
import torch

from fedbatch_bo.errors import InvalidParameters, NonFiniteGradient
from fedbatch_bo.neural_core import (
    MLP,
    DiagGaussian,
    flat_parameters,
    grad,
    kl_diag,
    load_checkpoint,
    make_optimizer,
    mlp_forward,
    opt_step,
    sample_reparam,
    save_checkpoint,
    standard_normal,
)


class TestMLP:
    """Test cases for dense networks."""

    def test_zero_network_gives_zero(self, generator):
        """Test that zero weights and biases give zero output."""
        net = MLP(3, (5,), 2, generator=generator)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        out = net(torch.randn(4, 3, dtype=torch.float64, generator=generator))
        assert torch.equal(out, torch.zeros(4, 2, dtype=torch.float64))

    def test_identity_layer(self, generator):
        """Test that a single identity linear layer returns its input."""
        net = MLP(3, (), 3, generator=generator)
        with torch.no_grad():
            net.layers[0].weight.copy_(torch.eye(3, dtype=torch.float64))
            net.layers[0].bias.zero_()
        x = torch.randn(5, 3, dtype=torch.float64, generator=generator)
        assert torch.equal(net(x), x)

    def test_forward_is_pure(self, generator):
        """Test that two forward passes agree exactly."""
        net = MLP(2, (8, 8), 1, generator=generator)
        x = torch.randn(6, 2, dtype=torch.float64, generator=generator)
        assert torch.equal(net(x), net(x))
        assert torch.equal(mlp_forward(net, x), net(x))

    def test_zero_output(self, generator):
        """Test that zero_output silences the network."""
        net = MLP(2, (4,), 3, generator=generator)
        net.zero_output()
        assert torch.count_nonzero(net(torch.ones(1, 2, dtype=torch.float64))) == 0

    def test_shape_mismatch(self, generator):
        """Test that the wrong input width raises."""
        with pytest.raises(InvalidParameters):
            MLP(3, (4,), 1, generator=generator)(torch.zeros(2, 4, dtype=torch.float64))

    def test_seeded_initialisation(self):
        """Test that the same generator seed builds identical networks."""
        a = MLP(3, (4,), 2, generator=torch.Generator().manual_seed(1))
        b = MLP(3, (4,), 2, generator=torch.Generator().manual_seed(1))
        assert torch.equal(flat_parameters(a), flat_parameters(b))
        assert all(torch.count_nonzero(layer.bias) == 0 for layer in a.layers)


class TestGrad:
    """Test cases for reverse-mode gradients."""

    def test_half_squared_norm(self):
        """Test that grad of 0.5*||theta||^2 is theta."""
        theta = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64, requires_grad=True)
        _, (g,) = grad(lambda: 0.5 * torch.sum(theta ** 2), [theta])
        assert torch.equal(g, theta.detach())

    def test_constant_loss(self):
        """Test that a loss not varying with theta has zero gradient."""
        theta = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
        _, (g,) = grad(lambda: 3.0 + 0.0 * theta.sum(), [theta])
        assert torch.equal(g, torch.zeros(2, dtype=torch.float64))

    def test_unused_parameter_gets_zero(self):
        """Test that parameters outside the graph receive zeros."""
        a = torch.ones(2, dtype=torch.float64, requires_grad=True)
        b = torch.ones(3, dtype=torch.float64, requires_grad=True)
        _, grads = grad(lambda: a.sum(), [a, b])
        assert torch.equal(grads[1], torch.zeros(3, dtype=torch.float64))

    def test_matches_finite_differences(self, generator):
        """Test network gradients against central differences within 1e-4 relative."""
        net = MLP(2, (4,), 1, generator=generator)
        x = torch.randn(7, 2, dtype=torch.float64, generator=generator)
        target = torch.randn(7, 1, dtype=torch.float64, generator=generator)
        params = list(net.parameters())

        def loss_fn():
            return torch.sum((net(x) - target) ** 2) + torch.sum(torch.exp(0.1 * net(x)))

        _, grads = grad(loss_fn, params)
        eps = 1e-6
        with torch.no_grad():
            for p, g in zip(params, grads):
                flat, gflat = p.view(-1), g.view(-1)
                for i in range(flat.numel()):
                    old = flat[i].item()
                    flat[i] = old + eps
                    up = loss_fn().item()
                    flat[i] = old - eps
                    down = loss_fn().item()
                    flat[i] = old
                    fd = (up - down) / (2 * eps)
                    assert gflat[i].item() == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_non_finite_loss(self):
        """Test that a NaN loss raises NonFiniteGradient."""
        theta = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
        with pytest.raises(NonFiniteGradient):
            grad(lambda: torch.log(-theta).sum(), [theta])


class TestGaussian:
    """Test cases for diagonal Gaussians."""

    def test_zero_noise_returns_mean(self):
        """Test that zero noise gives the mean."""
        q = DiagGaussian(torch.tensor([1.0, -2.0], dtype=torch.float64), torch.tensor([0.3, -1.0], dtype=torch.float64))
        assert torch.equal(sample_reparam(q, torch.zeros(2, dtype=torch.float64)), q.mean)

    def test_unit_noise(self):
        """Test that logvar 0 with unit noise gives mean + 1."""
        q = DiagGaussian(torch.tensor([1.0, -2.0], dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
        assert torch.equal(sample_reparam(q, torch.ones(2, dtype=torch.float64)), q.mean + 1.0)

    def test_empirical_variance(self, generator):
        """Test that 10^5 draws have variance exp(logvar) within 2%."""
        q = DiagGaussian(torch.zeros(2, dtype=torch.float64), torch.tensor([0.0, -1.5], dtype=torch.float64))
        noise = torch.randn(100_000, 2, dtype=torch.float64, generator=generator)
        samples = sample_reparam(q, noise)
        ratio = samples.var(dim=0) / q.variance
        assert torch.all(torch.abs(ratio - 1.0) < 0.02)

    def test_noise_width_checked(self):
        """Test that noise of the wrong width raises."""
        with pytest.raises(InvalidParameters):
            sample_reparam(standard_normal((3,)), torch.zeros(2, dtype=torch.float64))

    def test_log_prob_matches_torch(self, generator):
        """Test log_prob against torch.distributions.Normal."""
        mean = torch.randn(4, 3, dtype=torch.float64, generator=generator)
        logvar = torch.randn(4, 3, dtype=torch.float64, generator=generator)
        x = torch.randn(4, 3, dtype=torch.float64, generator=generator)
        expected = torch.distributions.Normal(mean, torch.exp(0.5 * logvar)).log_prob(x).sum(-1)
        assert torch.allclose(DiagGaussian(mean, logvar).log_prob(x), expected)

    def test_kl_identical(self):
        """Test that KL(q || q) = 0."""
        q = DiagGaussian(torch.tensor([0.4, 1.0], dtype=torch.float64), torch.tensor([0.2, -0.7], dtype=torch.float64))
        assert kl_diag(q, q).item() == pytest.approx(0.0, abs=1e-15)

    def test_kl_hand_value(self):
        """Test KL(N(1, 1) || N(0, 1)) = 0.5."""
        q = DiagGaussian(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        assert kl_diag(q, standard_normal((1,))).item() == pytest.approx(0.5)

    def test_kl_non_negative(self, generator):
        """Test Gibbs' inequality on random pairs."""
        for _ in range(20):
            q = DiagGaussian(*torch.randn(2, 5, dtype=torch.float64, generator=generator))
            p = DiagGaussian(*torch.randn(2, 5, dtype=torch.float64, generator=generator))
            assert kl_diag(q, p).item() >= 0.0

    def test_kl_matches_torch(self, generator):
        """Test KL against torch.distributions."""
        mq, lq, mp, lp = torch.randn(4, 3, dtype=torch.float64, generator=generator)
        ours = kl_diag(DiagGaussian(mq, lq), DiagGaussian(mp, lp))
        dq = torch.distributions.Normal(mq, torch.exp(0.5 * lq))
        dp = torch.distributions.Normal(mp, torch.exp(0.5 * lp))
        assert ours.item() == pytest.approx(torch.distributions.kl_divergence(dq, dp).sum().item())


class TestOptimizer:
    """Test cases for Adam steps."""

    def test_zero_gradient_leaves_params(self):
        """Test that a zero gradient does not move the parameters."""
        theta = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))
        optimizer = make_optimizer([theta], lr=0.1)
        opt_step([theta], [torch.zeros(2, dtype=torch.float64)], optimizer)
        assert torch.equal(theta.detach(), torch.tensor([1.0, 2.0], dtype=torch.float64))

    def test_quadratic_convergence(self):
        """Test that 500 steps on a scalar quadratic reach the optimum within 1e-3."""
        theta = _run_quadratic(500)
        assert abs(theta - 3.0) < 1e-3

    def test_deterministic(self):
        """Test that two identical runs give the identical parameter stream."""
        assert _run_quadratic(50) == _run_quadratic(50)

    def test_clipping_reports_pre_clip_norm(self):
        """Test that opt_step clips large gradients and returns the raw norm."""
        theta = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
        optimizer = make_optimizer([theta], lr=0.1)
        norm = opt_step([theta], [torch.tensor([12.0, 16.0], dtype=torch.float64)], optimizer, clip_norm=10.0)
        assert norm == pytest.approx(20.0)

    def test_shape_mismatch(self):
        """Test that mismatched gradients raise."""
        theta = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
        with pytest.raises(InvalidParameters):
            opt_step([theta], [torch.zeros(3, dtype=torch.float64)], make_optimizer([theta]))

    def test_invalid_learning_rate(self):
        """Test that a non-positive learning rate is rejected."""
        with pytest.raises(InvalidParameters):
            make_optimizer([torch.nn.Parameter(torch.zeros(1))], lr=0.0)


class TestCheckpoint:
    """Test cases for the checkpoint container."""

    def test_round_trip_bitwise(self, tmp_path):
        """Test that parameters survive save/load bit-exactly."""
        source = MLP(3, (4,), 2, generator=torch.Generator().manual_seed(0))
        path = save_checkpoint(tmp_path / "net.pt", source, step=17, metadata={"note": "x"})
        target = MLP(3, (4,), 2, generator=torch.Generator().manual_seed(1))
        payload = load_checkpoint(path, target)
        assert torch.equal(flat_parameters(source), flat_parameters(target))
        assert payload["step"] == 17
        assert payload["metadata"] == {"note": "x"}

    def test_optimizer_state_restored(self, tmp_path):
        """Test that Adam moments come back with the checkpoint."""
        net = MLP(2, (), 1, generator=torch.Generator().manual_seed(0))
        optimizer = make_optimizer(net.parameters())
        opt_step(list(net.parameters()), [torch.ones_like(p) for p in net.parameters()], optimizer)
        path = save_checkpoint(tmp_path / "net.pt", net, optimizer, step=1)
        other = MLP(2, (), 1, generator=torch.Generator().manual_seed(0))
        other_opt = make_optimizer(other.parameters())
        load_checkpoint(path, other, other_opt)
        state = other_opt.state_dict()["state"]
        assert len(state) == 2
        assert torch.equal(state[0]["exp_avg"], optimizer.state_dict()["state"][0]["exp_avg"])

    def test_shape_mismatch_rejected(self, tmp_path):
        """Test that loading into a differently shaped network raises."""
        path = save_checkpoint(tmp_path / "net.pt", MLP(3, (4,), 2))
        with pytest.raises(InvalidParameters):
            load_checkpoint(path, MLP(3, (5,), 2))

    def test_schema_version_checked(self, tmp_path):
        """Test that an unknown schema version is rejected."""
        path = save_checkpoint(tmp_path / "net.pt", MLP(1, (), 1))
        payload = torch.load(path, weights_only=True)
        payload["schema_version"] = 99
        torch.save(payload, path)
        with pytest.raises(InvalidParameters):
            load_checkpoint(path)


def _run_quadratic(steps):
    theta = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    optimizer = make_optimizer([theta], lr=0.1)
    for _ in range(steps):
        _, grads = grad(lambda: torch.sum((theta - 3.0) ** 2), [theta])
        opt_step([theta], grads, optimizer, clip_norm=None)
    return theta.item()


@pytest.fixture
def generator():
    """Seeded torch generator."""
    return torch.Generator().manual_seed(1234)
