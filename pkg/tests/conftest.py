import hypothesis
import pytest
import torch
import torch.nn as nn

from dat.models import EnergyModel

hypothesis.settings.register_profile("ci", deadline=None, max_examples=50)
hypothesis.settings.load_profile("ci")


class EnergyFnModel(EnergyModel):
    """Test double: wraps an analytic joint-energy function E(x) -> (B, K).

    logits = -E, so joint_energy(logits, y) returns E(x)[y] exactly and
    closed-form energies can be pushed through the attack and loss code.
    """

    def __init__(self, energy_fn, num_classes=2, in_dim=2):
        super().__init__()
        self.energy_fn = energy_fn
        self.num_classes = num_classes
        self.input_shape = (in_dim,)
        # parameterless modules confuse optimizers; keep one dummy weight
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return -self.energy_fn(x) + 0.0 * self.dummy

    def features(self, x):
        return x.reshape(x.shape[0], -1)

    def config(self):
        return {"kind": "energy_fn"}


@pytest.fixture
def quadratic_model():
    """E(x, y) = ||x - mu_y||^2 with mu_0 = 0, mu_1 = (1, 1)."""
    mus = torch.tensor([[0.0, 0.0], [1.0, 1.0]])

    def energy(x):
        return ((x[:, None, :] - mus[None]) ** 2).sum(-1)

    return EnergyFnModel(energy)


def seeded(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g
