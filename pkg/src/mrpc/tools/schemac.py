"""mrpc-schemac: compile a schema into a python stub module.

The output embeds the schema source and its digest as constants and emits
one client class per service with a snake_case method per rpc.  Output is a
pure function of the input bytes, so checked-in stubs stay diff-stable.
"""

import argparse
import sys

from ..schema import parse_schema, render_schema, schema_digest


def _snake(name: str) -> str:
    out = []
    for i, ch in enumerate(name):
        if ch.isupper() and i > 0 and (not name[i - 1].isupper() or (i + 1 < len(name) and name[i + 1].islower())):
            out.append("_")
        out.append(ch.lower())
    return "".join(out)


def generate(schema_text: str, source_name: str = "<schema>") -> str:
    desc = parse_schema(schema_text)
    digest = schema_digest(desc)
    lines = [
        f'"""Generated by mrpc-schemac from {source_name}; do not edit."""',
        "",
        'SCHEMA = """\\',
        schema_text.rstrip("\n"),
        '"""',
        "",
        f'DIGEST = "{digest.hex()}"',
        "",
        f"MESSAGES = ({', '.join(repr(m.name) for m in desc.messages)}{',' if len(desc.messages) == 1 else ''})",
    ]
    for svc in desc.services:
        lines += [
            "",
            "",
            f"class {svc.name}Client:",
            f'    """Stubs for service {svc.name}; wraps an mrpc Channel."""',
            "",
            "    def __init__(self, channel):",
            "        self._channel = channel",
        ]
        for m in svc.methods:
            lines += [
                "",
                f"    def {_snake(m.name)}(self, value=None, timeout=30.0, **fields):",
                f'        """rpc {m.name} ({m.request}) returns ({m.response})"""',
                "        return self._channel.call(",
                f'            "{svc.name}.{m.name}", value if value is not None else fields, timeout=timeout)',
            ]
    lines.append("")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mrpc-schemac", description="schema to python stubs")
    ap.add_argument("schema", help="schema source file")
    ap.add_argument("-o", "--out", help="output file (default stdout)")
    ap.add_argument("--check", action="store_true", help="parse and print the digest only")
    args = ap.parse_args(argv)

    with open(args.schema) as f:
        text = f.read()
    if args.check:
        desc = parse_schema(text)
        print(schema_digest(desc).hex())
        # round-trip guard: the canonical form must reparse to the same digest
        assert schema_digest(parse_schema(render_schema(desc))) == schema_digest(desc)
        return 0
    code = generate(text, source_name=args.schema)
    if args.out:
        with open(args.out, "w") as f:
            f.write(code)
    else:
        sys.stdout.write(code)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
