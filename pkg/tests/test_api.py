import json
import urllib.error
import urllib.request

import pytest

from edgetms.api import TwinApiServer
from edgetms.twins import TwinDocument, TwinStore

TID = "siteA/n1"


@pytest.fixture
def api():
    store = TwinStore()
    with TwinApiServer(store) as server:
        yield server, store


def call(server, method, path, body=None, raw=None):
    data = raw if raw is not None else (None if body is None else json.dumps(body).encode())
    req = urllib.request.Request(server.url + path, data=data, method=method)
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read())


def test_list_and_get(api):
    server, store = api
    assert call(server, "GET", "/twins") == (200, [])
    store.upsert_twin(TwinDocument(TID, {"desc": "x"}))
    assert call(server, "GET", "/twins") == (200, [TID])
    status, doc = call(server, "GET", f"/twins/{TID}")
    assert status == 200 and doc["attributes"] == {"desc": "x"} and doc["revision"] == 1


def test_put_creates_then_replaces(api):
    server, _ = api
    assert call(server, "PUT", f"/twins/{TID}", {"attributes": {"a": 1}}) == (201, {"twin_id": TID, "revision": 1})
    assert call(server, "PUT", f"/twins/{TID}", {"attributes": {"a": 2}})[0] == 200
    status, body = call(server, "PUT", f"/twins/{TID}", {"expected_revision": 1})
    assert status == 409 and body["code"] == "conflict"


def test_patch_property(api):
    server, store = api
    store.upsert_twin(TwinDocument(TID))
    status, body = call(server, "PATCH", f"/twins/{TID}/properties/features/traffic/properties/count", 17)
    assert status == 200 and body["revision"] == 2
    assert store.get_twin(TID).get("features/traffic/properties/count") == 17
    deep = "/".join(["features", "a", "properties"] + list("bcdefg"))
    status, body = call(server, "PATCH", f"/twins/{TID}/properties/{deep}", 1)
    assert status == 400 and body["code"] == "invalid_path"


def test_errors(api):
    server, _ = api
    status, body = call(server, "GET", "/twins/nope/none")
    assert status == 404 and set(body) == {"code", "message"}
    assert call(server, "PATCH", "/twins/nope/none/properties/attributes/a", 1)[0] == 404
    assert call(server, "GET", "/elsewhere")[0] == 404
    assert call(server, "PUT", f"/twins/{TID}", raw=b"{not json")[0] == 400
    assert call(server, "PUT", f"/twins/{TID}", [1, 2])[0] == 400
    assert call(server, "PUT", f"/twins/{TID}", {"twin_id": "other/x"})[0] == 400
    assert call(server, "PUT", "/twins/bad%20id/x", {})[0] == 400


def test_signatures_query(api):
    server, store = api
    store.ensure_twin(TID)
    for i in range(10):
        store.append(TID, "co2_ppm" if i % 2 else "noise_db", float(i), 100 * (i + 1), i / 10)
    status, rows = call(server, "GET", f"/twins/{TID}/signatures?from=0&to=1000&sources=co2_ppm&limit=2&wr=1")
    assert status == 200
    assert [r["value"] for r in rows] == [9.0, 7.0]
    status, rows = call(server, "GET", f"/twins/{TID}/signatures?min_quality=0.75&wr=0")
    assert [r["quality"] for r in rows] == [0.9, 0.8]
    status, body = call(server, "GET", f"/twins/{TID}/signatures?from=10&to=5")
    assert status == 400
    assert call(server, "GET", f"/twins/{TID}/signatures?limit=x")[0] == 400
    assert call(server, "GET", f"/twins/{TID}/signatures?bogus=1")[0] == 400
    assert call(server, "GET", "/twins/no/twin/signatures")[0] == 404
