"""Typed polygon clouds: validity of the equivariant and MLP heads, then circumradius guidance."""
import json

from _common import finish, overrides, parser, setup

from cvfm import experiments as X
from cvfm.heads import save_head

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--skip-mlp", action="store_true")
    p.add_argument("--skip-guidance", action="store_true")
    args = p.parse_args()
    setup(args)
    cfg = X.load_train_config("polygon_equivariant", **overrides(args))
    eq = X.polygon_experiment(cfg)
    summary = {"equivariant_validity": eq["validity"], "equivariant_seconds": eq["train_seconds"],
               "equivariant_final_loss": eq["final_loss"]}
    if args.out:
        from pathlib import Path
        Path(args.out).mkdir(parents=True, exist_ok=True)
        save_head(eq["head"], f"{args.out}/polygon_equivariant.bin", {"train_config": cfg.to_dict()})
    if not args.skip_mlp:
        mlp = X.polygon_experiment(X.load_train_config("polygon_mlp", **overrides(args)))
        summary.update(mlp_validity=mlp["validity"], mlp_seconds=mlp["train_seconds"])
    if not args.skip_guidance:
        g = json.loads((X.CONFIG_DIR / "guided_circumradius.json").read_text())
        summary.update({f"guided_{k}": v for k, v in X.guided_experiment(eq["head"], cfg.dataset, **g).items()})
    finish(args, summary, "polygon")
