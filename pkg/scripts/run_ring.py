"""Unconditional 8-Gaussian ring and factorised categorical runs, scored by sliced-W2 and marginal TV."""
from _common import finish, overrides, parser, setup

from cvfm import experiments as X

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    setup(args)
    ring = X.ring_experiment(X.load_train_config("ring", **overrides(args)))
    cat = X.categorical_experiment(X.load_train_config("categorical", **overrides(args)))
    finish(args, {"ring_sliced_w2": ring["sliced_w2"], "ring_floor": ring["floor"],
                  "ring_seconds": ring["train_seconds"], "categorical_max_tv": cat["max_tv"],
                  "categorical_tv": cat["tv"], "categorical_seconds": cat["train_seconds"]}, "unconditional")
