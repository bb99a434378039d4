import pytest
import torch

from app.checkpoints import fresh_stage1
from app.data.tiles import Modality
from app.diffusion.denoiser import Condition, DenoiserNet
from app.diffusion.features import extract_sar_features
from app.diffusion.losses import diffusion_loss
from app.diffusion.schedule import build_schedule
from app.digests import parameter_digest
from app.errors import InvalidParameterError, NonFiniteLossError
from app.seeding import seeded


@pytest.fixture(scope="module")
def net():
    with seeded(0):
        return DenoiserNet(base_channels=8, prompt_dim=16, time_dim=32).eval()


def _cond(b=2, size=32, dim=16):
    g = torch.Generator().manual_seed(5)
    return Condition(sar=torch.rand(b, 1, size, size, generator=g), prompt_embedding=torch.randn(b, dim, generator=g))


def test_control_branch_is_inert_at_initialisation(net):
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    t = torch.tensor([3, 150])
    with torch.no_grad():
        plain = net(x, t)
        conditioned = net(x, t, _cond())
    assert float((plain - conditioned).abs().max()) < 1e-7


def test_tap_shapes(net):
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        eps_hat, taps = net(x, 10, _cond(), return_taps=True)
    assert eps_hat.shape == x.shape
    assert net.tap_channels == (32, 16, 8)
    assert [tuple(t.shape) for t in taps] == [(2, 32, 8, 8), (2, 16, 16, 16), (2, 8, 32, 32)]


def test_base_is_frozen(net):
    assert all(not p.requires_grad for p in net.base.parameters())
    trainable = {id(p) for p in net.trainable_parameters()}
    assert not trainable & {id(p) for p in net.base.parameters()}
    assert id(net.prompt_encoder.table) in trainable


def test_size_checks(net):
    with pytest.raises(InvalidParameterError):
        net(torch.zeros(1, 3, 30, 32), 1)
    with pytest.raises(InvalidParameterError):
        net(torch.zeros(2, 3, 32, 32), 1, _cond(size=16))


def test_condition_shape_checks():
    with pytest.raises(InvalidParameterError):
        Condition(sar=torch.zeros(1, 3, 8, 8), prompt_embedding=torch.zeros(1, 4))
    with pytest.raises(InvalidParameterError):
        Condition(sar=torch.zeros(2, 1, 8, 8), prompt_embedding=torch.zeros(1, 4))


def test_loss_is_zero_for_noise_oracle():
    sched = build_schedule(50, 1e-4, 0.02)
    x0 = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    scaled = x0 * 2.0 - 1.0

    def oracle(x_t, t, cond):
        ab = sched.alpha_bar_at(t).to(torch.float64).view(-1, 1, 1, 1)
        return (x_t - torch.sqrt(ab) * scaled) / torch.sqrt(1.0 - ab)

    loss = diffusion_loss(oracle, x0, _cond(size=8), sched, 0)
    assert float(loss) < 1e-12


def test_loss_of_zero_predictor_is_noise_energy():
    sched = build_schedule(50, 1e-4, 0.02)
    x0 = torch.rand(4, 3, 64, 64)
    loss = diffusion_loss(lambda x, t, c: torch.zeros_like(x), x0, _cond(b=4, size=64), sched, 0)
    assert abs(float(loss) - 1.0) < 0.02

def test_constant_offset_predictor_gives_unit_loss():
    sched = build_schedule(50, 1e-4, 0.02)
    x0 = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
    scaled = x0 * 2.0 - 1.0

    def shifted_oracle(x_t, t, cond):
        ab = sched.alpha_bar_at(t).to(torch.float64).view(-1, 1, 1, 1)
        return (x_t - torch.sqrt(ab) * scaled) / torch.sqrt(1.0 - ab) + 1.0

    loss = diffusion_loss(shifted_oracle, x0, _cond(size=8), sched, 3)
    assert float(loss) == pytest.approx(1.0, abs=1e-9)


def test_loss_gradient_matches_central_differences():
    with seeded(1):
        net = DenoiserNet(base_channels=8, prompt_dim=16, time_dim=32).double()
    sched = build_schedule(50, 1e-4, 0.02)
    g = torch.Generator().manual_seed(4)
    x0 = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    cond = Condition(sar=torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64),
                     prompt_embedding=torch.randn(1, 16, generator=g, dtype=torch.float64))
    chosen = [net.mid_zero.weight, net.skip_zero[0].weight, net.skip_zero[2].bias]
    assert all(p.requires_grad for p in chosen)

    grads = torch.autograd.grad(diffusion_loss(net, x0, cond, sched, 11), chosen)
    step = 1e-3
    for param, grad in zip(chosen, grads):
        index = int(grad.abs().argmax())
        flat = param.data.view(-1)
        original = float(flat[index])
        with torch.no_grad():
            flat[index] = original + step
            up = float(diffusion_loss(net, x0, cond, sched, 11))
            flat[index] = original - step
            down = float(diffusion_loss(net, x0, cond, sched, 11))
            flat[index] = original
        analytic = float(grad.view(-1)[index])
        assert analytic != 0.0
        assert (up - down) / (2 * step) == pytest.approx(analytic, rel=1e-3)



def test_loss_is_seeded():
    sched = build_schedule(50, 1e-4, 0.02)
    x0 = torch.rand(2, 3, 8, 8)
    zero = lambda x, t, c: torch.zeros_like(x)  # noqa: E731
    assert float(diffusion_loss(zero, x0, _cond(size=8), sched, 7)) == float(diffusion_loss(zero, x0, _cond(size=8), sched, 7))


def test_non_finite_output_aborts():
    sched = build_schedule(50, 1e-4, 0.02)
    with pytest.raises(NonFiniteLossError):
        diffusion_loss(lambda x, t, c: torch.full_like(x, float("nan")), torch.rand(1, 3, 8, 8), _cond(b=1, size=8), sched, 0)


def test_extract_sar_features(tiny_cfg, tiny_pairs):
    stage1 = fresh_stage1(tiny_cfg)
    before = parameter_digest(stage1.net)
    cond = Condition.from_pair(tiny_pairs[0], stage1.net.prompt_encoder)
    pyramid = extract_sar_features(stage1, cond)
    assert pyramid.source == Modality.SAR
    assert pyramid.divisors == (4, 2, 1)
    assert pyramid.channels == stage1.net.tap_channels
    assert pyramid.image_size == (64, 64)
    again = extract_sar_features(stage1, cond)
    assert all(torch.equal(a.fmap, b.fmap) for a, b in zip(pyramid.levels, again.levels))
    other = extract_sar_features(stage1, cond, noise_seed=tiny_cfg.diffusion.noise_seed + 1)
    assert not torch.equal(pyramid.levels[-1].fmap, other.levels[-1].fmap)
    assert parameter_digest(stage1.net) == before
    with pytest.raises(InvalidParameterError):
        extract_sar_features(stage1, cond, t_star=tiny_cfg.schedule.T + 1)
