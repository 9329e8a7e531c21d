"""Classifier communication and computation costs per client.

Defaults reproduce the large-scale setting (l=1280, C=100, 10 clients,
100 rounds, 50 000 training samples, 32-bit weights).

Usage: python3 scripts/cost_table.py [--l 1280] [--classes 100] [--rounds 100] [--samples 50000]
"""

import argparse

from hyperfed.metrics import cost_classifier_comm, cost_ffc_flops


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--l", type=int, default=1280)
    ap.add_argument("--classes", type=int, default=100)
    ap.add_argument("--clients", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=100)
    ap.add_argument("--samples", type=int, default=50_000)
    ap.add_argument("--bytes-per-param", type=int, default=4)
    args = ap.parse_args()

    l, c = args.l, args.classes
    sizes = [args.samples // args.clients + (k < args.samples % args.clients) for k in range(args.clients)]
    fedavg = cost_classifier_comm("fedavg", l, c, args.rounds, args.bytes_per_param)
    ffc = cost_classifier_comm("ffc", l, c, bytes_per_param=args.bytes_per_param)
    client_flops, server_flops = cost_ffc_flops(l, c, sizes)
    print("convention: per client, classifier parameters only; trainable head counted down and up every round")
    print(f"{'method':<22s} {'comm / client':>14s} {'FLOPs (all clients)':>20s}")
    print(f"{'trainable head':<22s} {fedavg / 1e6:11.2f} MB {'-':>20s}")
    print(f"{'fixed head + calib.':<22s} {ffc / 1e6:11.2f} MB {client_flops:20.4e}")
    print(f"server solve FLOPs: {server_flops:.4e}")


if __name__ == "__main__":
    main()
