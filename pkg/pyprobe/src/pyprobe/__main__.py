import argparse
import sys

from .model import ModelConfig
from .server import AdapterConfig, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pyprobe", description="serve a causal LM behind the probe wire protocol")
    parser.add_argument("--model", default="tiny", help="model identifier (built-in: tiny)")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--embed", type=int, default=32)
    parser.add_argument("--hidden", type=int, default=64)
    parser.add_argument("--lr", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-len", type=int, default=512)
    parser.add_argument("--pooling", choices=("mean-hidden", "stats"), default="mean-hidden")
    parser.add_argument("--transport", default="stdio", help="stdio | tcp:<port>")
    args = parser.parse_args(argv)

    if args.model != "tiny":
        print(f"pyprobe: unknown model {args.model!r} (built-in: tiny)", file=sys.stderr)
        return 1
    cfg = AdapterConfig(
        model=ModelConfig(
            embed=args.embed, hidden=args.hidden, lr=args.lr, seed=args.seed, max_len=args.max_len, device=args.device
        ),
        pooling=args.pooling,
        transport=args.transport,
    )
    return serve(cfg)


if __name__ == "__main__":
    sys.exit(main())
