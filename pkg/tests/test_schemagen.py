import json

import pytest

from danserver.errors import SchemaError
from danserver.model import ColumnSpec, CType
from danserver.schemagen import (
    MappingDescriptor,
    generate_client_interface,
    load_descriptors,
    object_type_name,
    parse_schema,
    write_outputs,
)

SMT = ('{"tables":[{"name":"smt_ped","columns":[{"name":"channel_id","type":"int"},'
       '{"name":"pedestal","type":"float"},{"name":"gain","type":"float"}],"order_by":"channel_id"}]}')


def table(name="t", columns=(("a", "int"),), order_by="a"):
    return {"name": name, "columns": [{"name": n, "type": t} for n, t in columns], "order_by": order_by}


def doc(*tables):
    return json.dumps({"tables": list(tables)})


def test_parse_reference_schema():
    schema = parse_schema(SMT)
    (t,) = schema.tables
    assert t.name == "smt_ped"
    assert t.columns == (ColumnSpec("channel_id", CType.INT), ColumnSpec("pedestal", CType.FLOAT),
                         ColumnSpec("gain", CType.FLOAT))
    assert t.order_by == "channel_id"
    assert len(schema.digest) == 64


@pytest.mark.parametrize("bad,needle", [
    (doc(table(columns=(("a", "int"), ("a", "float")))), "'a'"),
    (doc(table(columns=(("a", "double"),))), "double"),
    (doc(table(), table()), "duplicate table"),
    (doc(table(columns=())), "non-empty"),
    (doc(table(order_by="zz")), "zz"),
    (doc(table(name="bad name")), "bad name"),
    ('{"tables": {}}', "tables"),
    ("[]", "tables"),
    ("{not json", "JSON"),
])
def test_schema_errors(bad, needle):
    with pytest.raises(SchemaError) as info:
        parse_schema(bad)
    assert needle in str(info.value)


def test_object_type_names():
    assert object_type_name("smt_ped") == "SmtPed"
    assert object_type_name("SMT_PED") == "SmtPed"
    assert object_type_name("gain") == "Gain"


def test_interface_contents():
    out = generate_client_interface(parse_schema(SMT))
    assert sorted(out) == ["smt_ped.ifc", "smt_ped.mapping.json"]
    ifc = out["smt_ped.ifc"]
    assert "object SmtPed {" in ifc
    for line in ("channel_id : INT;", "pedestal   : FLOAT;", "gain       : FLOAT;"):
        assert line in ifc
    assert "get_smt_ped(run: u64, variant: string) -> SmtPed" in ifc
    assert "ordered by channel_id" in ifc
    assert parse_schema(SMT).digest in ifc
    desc = json.loads(out["smt_ped.mapping.json"])
    assert desc["object_type"] == "SmtPed"
    assert desc["key"] == ["run", "variant"]
    assert [f["ctype"] for f in desc["fields"]] == ["INT", "FLOAT", "FLOAT"]


def test_deterministic_and_hash_sensitive():
    a = generate_client_interface(parse_schema(SMT))
    b = generate_client_interface(parse_schema(SMT))
    assert a == b
    c = generate_client_interface(parse_schema(SMT.replace('"gain"', '"gain2"')))
    assert c["smt_ped.ifc"] != a["smt_ped.ifc"]


def test_two_tables():
    out = generate_client_interface(parse_schema(doc(table("a_b"), table("c", (("x", "string"),), "x"))))
    assert sorted(out) == ["a_b.ifc", "a_b.mapping.json", "c.ifc", "c.mapping.json"]
    assert "object AB {" in out["a_b.ifc"]
    assert "x : STRING;" in out["c.ifc"]


def test_write_and_load_descriptors(tmp_path):
    src = tmp_path / "schema.json"
    src.write_text(SMT)
    paths = write_outputs(src, tmp_path / "out")
    assert [p.name for p in paths] == ["smt_ped.ifc", "smt_ped.mapping.json"]
    loaded = load_descriptors(tmp_path / "out")
    assert loaded == {"smt_ped": parse_schema(SMT).tables[0].columns}


def test_descriptor_round_trip():
    desc = MappingDescriptor("t", "T", (ColumnSpec("a", CType.INT),), "a", "0" * 64)
    assert MappingDescriptor.from_json(desc.to_json()) == desc
    with pytest.raises(SchemaError):
        MappingDescriptor.from_json({"table": "t"})


def test_unreadable_descriptor(tmp_path):
    (tmp_path / "x.mapping.json").write_text("{")
    with pytest.raises(SchemaError):
        load_descriptors(tmp_path)
