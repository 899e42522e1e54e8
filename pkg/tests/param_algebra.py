"""Closed-form parameter count of the reference (table1) network.

Written from the layer definitions alone (no package imports) so it can
cross-check the builder's count.
"""

ROWS = [
    # name, kind, width, repetitions
    ("down1", "conv3", 32, 1),
    ("down2", "simple", 32, 1),
    ("down3", "bottleneck", 128, 3),
    ("down4", "bottleneck", 256, 8),
    ("down5", "bottleneck", 512, 10),
    ("across", "bottleneck", 1024, 3),
    ("up1", "bottleneck", 512, 10),
    ("up2", "bottleneck", 256, 8),
    ("up3", "bottleneck", 128, 3),
    ("up4", "simple", 32, 1),
    ("up5", "conv3", 32, 1),
    ("classifier", "conv1", 1, 1),
]


def conv(k, cin, cout):
    return k * k * cin * cout + cout


def bn(c):
    return 2 * c


def simple(cin, cout, short=True):
    extra = conv(1, cin, cout) if short and cin != cout else 0
    return bn(cin) + conv(3, cin, cout) + extra


def bottleneck(cin, cout, short=True):
    m = cout // 4
    extra = conv(1, cin, cout) if short and cin != cout else 0
    return bn(cin) + conv(1, cin, m) + bn(m) + conv(3, m, m) + bn(m) + conv(1, m, cout) + extra


def table1_count(long_skips=True, short_skips=True):
    total = 0
    cin = 1
    inputs = {}
    for i, (name, kind, width, reps) in enumerate(ROWS):
        inputs[name] = cin
        for _ in range(reps):
            if kind == "conv3":
                total += conv(3, cin, width) + (bn(cin) if i > 0 else 0)
            elif kind == "conv1":
                total += conv(1, cin, width) + bn(cin)
            elif kind == "simple":
                total += simple(cin, width, short_skips)
            else:
                total += bottleneck(cin, width, short_skips)
            cin = width
    if long_skips:
        # mirrored pairs: j-th up row takes the j-th down row from the bottom
        widths = {name: width for name, _, width, _ in ROWS}
        pairs = [("down5", "up1"), ("down4", "up2"), ("down3", "up3"), ("down2", "up4"), ("down1", "up5")]
        for src, dst in pairs:
            if widths[src] != inputs[dst]:
                total += conv(1, widths[src], inputs[dst])
    return total


if __name__ == "__main__":
    print(table1_count())
