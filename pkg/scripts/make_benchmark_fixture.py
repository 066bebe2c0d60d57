"""Write the deterministic multi-ground-truth benchmark fixture split and
print its aggregate statistics.

Usage: python scripts/make_benchmark_fixture.py --out fixture.json
"""

import json

import click

from zscir.datasets import (dataset_stats, make_circo_stats_fixture,
                            save_dataset)


@click.command()
@click.option("--out", required=True, type=click.Path())
def main(out):
    queries = make_circo_stats_fixture()
    save_dataset(queries, out)
    click.echo(json.dumps(dataset_stats(queries), indent=2, default=str))


if __name__ == "__main__":
    main()
