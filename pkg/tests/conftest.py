import pytest
import torch

from tinydlm.backbone import Backbone, BackboneConfig


def tiny_config(**kw):
    base = dict(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=128)
    base.update(kw)
    return BackboneConfig(**base)


def tiny_model(seed=0, **kw):
    torch.manual_seed(seed)
    return Backbone(tiny_config(**kw)).eval()


@pytest.fixture
def model():
    return tiny_model()


def uniform_model(**kw):
    """Backbone whose logits are identically zero (uniform over the vocabulary)."""
    m = tiny_model(**kw)
    with torch.no_grad():
        m.head.weight.zero_()
    return m


def constant_model(token_id, margin=10.0, **kw):
    """Backbone that predicts ``token_id`` at every position, whatever the input."""
    m = tiny_model(**kw)
    with torch.no_grad():
        m.ln_f.weight.zero_()
        m.ln_f.bias.zero_()
        m.ln_f.bias[0] = 1.0
        m.head.weight.zero_()
        m.head.weight[token_id, 0] = margin
    return m


class TableModel(Backbone):
    """Backbone whose logits come from a fixed [max_seq_len, V] table indexed by position."""

    def __init__(self, table, **kw):
        super().__init__(tiny_config(max_seq_len=table.shape[0], **kw))
        self.table = table

    def forward(self, tokens, mask_spec=None, *, positions=None, return_kv=False, **kw):
        if positions is None:
            positions = torch.arange(tokens.shape[1])
        logits = self.table[positions][None].expand(tokens.shape[0], -1, -1)
        if return_kv:
            return logits, super().forward(tokens, mask_spec, positions=positions, return_kv=True, **kw)[1]
        return logits
