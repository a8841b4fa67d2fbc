"""Label-conditioned ring: nearest-centre hit rate per target and the constant-label loss control."""
from _common import finish, overrides, parser, setup

from cvfm import experiments as X

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    setup(args)
    finish(args, X.conditioned_ring_experiment(X.load_train_config("ring_conditioned", **overrides(args))),
           "conditioned")
