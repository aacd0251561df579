"""Gradient-check suite and structural inspection of forward graphs."""
import torch

from .ddre import DDRE
from .network import DHNet, NetworkConfig
from .losses import total_loss
from .nn_core import LayerNorm2d, conv2d, grad_check, make_conv
from .volterra import VBlock, VolterraSecondOrder

# autograd node names of pointwise nonlinear activation functions
ACTIVATION_NODES = (
    "Relu", "Sigmoid", "Tanh", "Gelu", "Silu", "Elu", "LeakyRelu", "Softplus",
    "Hardtanh", "Hardswish", "Hardsigmoid", "Mish", "Prelu", "Celu", "Selu",
    "Threshold", "LogSigmoid", "Rrelu", "Clamp", "Softsign",
)


def graph_nodes(output):
    """Names of all autograd nodes reachable from ``output``."""
    seen, stack, names = set(), [output.grad_fn], []
    while stack:
        node = stack.pop()
        if node is None or node in seen:
            continue
        seen.add(node)
        names.append(type(node).__name__)
        stack.extend(nxt for nxt, _ in node.next_functions)
    return names


def activation_nodes(output):
    return [n for n in graph_nodes(output) if n.removesuffix("Backward0").removesuffix("Backward1")
            in ACTIVATION_NODES]


def toy_network_config(width=4, **overrides):
    base = dict(width=width, blocks=(1,) * 9, rank=2, experts=5, routers=4, precision="double")
    base.update(overrides)
    return NetworkConfig(**base)


class _LossOf(torch.nn.Module):
    def __init__(self, target):
        super().__init__()
        self.target = target

    def forward(self, pred):
        return total_loss(pred, self.target).reshape(1)


def gradient_suite(seed=0, network=True, max_entries=3):
    """Grad-check every differentiable building block at double precision.

    Returns ``{name: (report, tolerance)}``. The whole network is probed on a
    random subset of ``max_entries`` elements per tensor.
    """
    torch.manual_seed(seed)
    dt = torch.float64
    x = lambda *shape: torch.randn(*shape, dtype=dt, requires_grad=True)
    results = {}

    conv = make_conv(2, 3, 3).to(dt)
    results["conv2d"] = (grad_check(lambda t: conv2d(t, conv), [x(1, 2, 5, 5)],
                                    conv.named_parameters(), seed=seed), 1e-6)
    ln = LayerNorm2d(4).to(dt)
    with torch.no_grad():
        ln.weight.normal_()
        ln.bias.normal_()
    results["layer_norm"] = (grad_check(ln, [x(2, 4, 3, 3)], seed=seed), 1e-5)
    vol = VolterraSecondOrder(3, rank=2).to(dt)
    results["volterra_second_order"] = (grad_check(vol, [x(1, 3, 6, 6)], seed=seed), 1e-5)
    vb = VBlock(3, rank=2).to(dt)
    results["vblock"] = (grad_check(vb, [x(2, 3, 6, 6)], seed=seed), 1e-5)
    for mode in ("input_conditioned", "static"):
        dd = DDRE(3, prior_channels=2, experts=3, routers=2, router_mode=mode).to(dt)
        prior = torch.randn(2, 2, 6, 6, dtype=dt)
        results[f"ddre[{mode}]"] = (grad_check(lambda f: dd(f, prior), [x(2, 3, 6, 6)],
                                               dd.named_parameters(), seed=seed), 1e-5)
    target = torch.rand(1, 3, 8, 8, dtype=dt)
    pred = torch.rand(1, 3, 8, 8, dtype=dt, requires_grad=True)
    results["total_loss"] = (grad_check(_LossOf(target), [pred], seed=seed), 1e-5)
    if network:
        net = DHNet(toy_network_config()).to(dt)
        results["dhnet[C=4]"] = (grad_check(net, [torch.rand(1, 3, 8, 8, dtype=dt)],
                                            max_entries=max_entries, seed=seed), 1e-4)
    for name, (report, tol) in results.items():
        report.tol = tol
    return results
