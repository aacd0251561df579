import numpy as np
import pytest
import torch


def naive_conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Direct-summation cross-correlation oracle on numpy arrays."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n, c_in, h, w = x.shape
    c_out, cpg, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    opg = c_out // groups
    for b in range(n):
        for o in range(c_out):
            g = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cpg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += weight[o, ci, u, v] * xp[b, g * cpg + ci, i * stride + u, j * stride + v]
                    out[b, o, i, j] = acc + (0.0 if bias is None else bias[o])
    return out


def conv_np(x, conv):
    b = None if conv.bias is None else conv.bias.detach().numpy()
    return naive_conv2d(x, conv.weight.detach().numpy(), b, conv.stride[0], conv.padding[0], conv.groups)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


def randomize(module, scale=0.5, seed=0):
    """Overwrite every parameter with seeded Gaussian noise (so nothing is zero/one by init)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the terminal summary prints them all."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append((number, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
