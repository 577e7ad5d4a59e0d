"""Schema-driven generation of client interface files and mapping descriptors.

Input is a JSON schema document::

    {"tables": [{"name": "smt_ped",
                 "columns": [{"name": "channel_id", "type": "int"}, ...],
                 "order_by": "channel_id"}]}

For each table the generator writes ``<table>.ifc`` (a declaration-style
description for client authors) and ``<table>.mapping.json`` (read by the
server at startup to check backend files against the declared columns).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .errors import SchemaError
from .model import ColumnSpec, CType

_TYPE_NAMES = {"int": CType.INT, "float": CType.FLOAT, "string": CType.STRING}
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
KEY_FIELDS = ("run", "variant")


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple[ColumnSpec, ...]
    order_by: str

    @property
    def object_type(self) -> str:
        return object_type_name(self.name)


@dataclass(frozen=True)
class SchemaDoc:
    tables: tuple[TableSchema, ...]
    digest: str


@dataclass(frozen=True)
class MappingDescriptor:
    table: str
    object_type: str
    fields: tuple[ColumnSpec, ...]
    order_by: str
    schema_sha256: str

    def to_json(self) -> dict:
        return {
            "table": self.table,
            "object_type": self.object_type,
            "key": list(KEY_FIELDS),
            "fields": [{"name": c.name, "ctype": c.ctype.name} for c in self.fields],
            "order_by": self.order_by,
            "schema_sha256": self.schema_sha256,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MappingDescriptor":
        try:
            fields = tuple(ColumnSpec(f["name"], CType[f["ctype"]]) for f in doc["fields"])
            return cls(doc["table"], doc["object_type"], fields, doc["order_by"], doc["schema_sha256"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed mapping descriptor: {exc}") from None


def object_type_name(table: str) -> str:
    return "".join(part[:1].upper() + part[1:].lower() for part in table.split("_") if part)


def parse_schema(document: Union[str, bytes]) -> SchemaDoc:
    raw = document.encode("utf-8") if isinstance(document, str) else bytes(document)
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise SchemaError(f"schema is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("tables"), list):
        raise SchemaError("schema must be an object with a 'tables' list")

    tables = []
    seen_tables = set()
    for idx, t in enumerate(doc["tables"]):
        if not isinstance(t, dict):
            raise SchemaError(f"tables[{idx}] must be an object")
        name = t.get("name")
        if not isinstance(name, str) or not _IDENT.fullmatch(name):
            raise SchemaError(f"tables[{idx}]: invalid table name {name!r}")
        if name in seen_tables:
            raise SchemaError(f"duplicate table {name!r}")
        seen_tables.add(name)
        cols = t.get("columns")
        if not isinstance(cols, list) or not cols:
            raise SchemaError(f"table {name!r}: columns must be a non-empty list")
        columns = []
        seen_cols = set()
        for c in cols:
            cname = c.get("name") if isinstance(c, dict) else None
            if not isinstance(cname, str) or not _IDENT.fullmatch(cname):
                raise SchemaError(f"table {name!r}: invalid column name {cname!r}")
            if cname in seen_cols:
                raise SchemaError(f"table {name!r}: duplicate column {cname!r}")
            seen_cols.add(cname)
            ctype = _TYPE_NAMES.get(c.get("type"))
            if ctype is None:
                raise SchemaError(
                    f"table {name!r}, column {cname!r}: unknown type {c.get('type')!r} "
                    f"(expected one of {sorted(_TYPE_NAMES)})"
                )
            columns.append(ColumnSpec(cname, ctype))
        order_by = t.get("order_by")
        if order_by not in seen_cols:
            raise SchemaError(f"table {name!r}: order_by {order_by!r} is not a column")
        tables.append(TableSchema(name, tuple(columns), order_by))
    return SchemaDoc(tuple(tables), hashlib.sha256(raw).hexdigest())


def mapping_descriptor(schema: SchemaDoc, table: TableSchema) -> MappingDescriptor:
    return MappingDescriptor(table.name, table.object_type, table.columns, table.order_by, schema.digest)


def render_interface(schema: SchemaDoc, table: TableSchema) -> str:
    width = max(len(c.name) for c in table.columns)
    lines = [
        f"// generated from schema sha256:{schema.digest}",
        "// do not edit; regenerate with `dan schemagen`",
        "",
        f"object {table.object_type} {{",
    ]
    for col in table.columns:
        lines.append(f"    {col.name.ljust(width)} : {col.ctype.name};")
    lines += [
        "}",
        "",
        f"// rows ordered by {table.order_by} ascending",
        f"get_{table.name}(run: u64, variant: string) -> {table.object_type}",
        "",
    ]
    return "\n".join(lines)


def generate_client_interface(schema: SchemaDoc) -> dict[str, str]:
    """All output files for ``schema``, as file name -> text."""
    out = {}
    for table in schema.tables:
        out[f"{table.name}.ifc"] = render_interface(schema, table)
        desc = mapping_descriptor(schema, table).to_json()
        out[f"{table.name}.mapping.json"] = json.dumps(desc, indent=2) + "\n"
    return out


def write_outputs(schema_path, out_dir) -> list[Path]:
    schema = parse_schema(Path(schema_path).read_bytes())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in sorted(generate_client_interface(schema).items()):
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written


def load_descriptors(directory) -> dict[str, tuple[ColumnSpec, ...]]:
    """Table name -> declared columns, from every ``*.mapping.json`` in ``directory``."""
    found = {}
    for path in sorted(Path(directory).glob("*.mapping.json")):
        try:
            doc = json.loads(path.read_text("utf-8"))
        except (OSError, ValueError) as exc:
            raise SchemaError(f"cannot read descriptor {path}: {exc}") from None
        desc = MappingDescriptor.from_json(doc)
        found[desc.table] = desc.fields
    return found
