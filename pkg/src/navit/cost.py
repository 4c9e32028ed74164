"""Per-layer transformer FLOP model shared by training accounting and analysis.

Per layer and sequence of ``m`` tokens at width ``D`` (MLP expansion 4):
attention projections ``8 m D^2``, attention scores and mixing ``4 m^2 D``,
MLP ``16 m D^2``.
"""

TRAIN_MULTIPLIER = 3  # forward + backward


def attention_projection_flops(m, width):
    return 8 * m * width**2


def attention_score_flops(m, width):
    return 4 * m**2 * width


def mlp_flops(m, width):
    return 16 * m * width**2


def layer_flops(m, width):
    return attention_projection_flops(m, width) + attention_score_flops(m, width) + mlp_flops(m, width)


def encoder_flops(seq_len, width, depth, sequences=1, train=False):
    total = depth * sequences * layer_flops(seq_len, width)
    return TRAIN_MULTIPLIER * total if train else total
