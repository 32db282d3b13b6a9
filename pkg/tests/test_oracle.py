import base64
import json
import threading

import numpy as np
import pytest
import requests

from transferattack import oracle as O
from transferattack.images import encode_png
from transferattack.models import predict

from conftest import random_images, tiny_model


@pytest.fixture
def model():
    return tiny_model(seed=9)


@pytest.fixture
def service(model):
    with O.serve_mock_service(model) as svc:
        yield svc


def test_ledger_counts_concurrent_records():
    ledger = O.QueryLedger()

    def work(k):
        for _ in range(200):
            ledger.record(f"img-{k % 3}")

    threads = [threading.Thread(target=work, args=(k,)) for k in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ledger.total == 1200
    assert ledger.count("img-0") == 400 and ledger.count("never") == 0


def test_local_oracle_is_label_only_by_default(model, rng):
    x = random_images(rng, 1)[0]
    v = O.LocalOracle(model).classify(x, "a")
    assert v.scores is None
    assert v.label == model.class_names[predict(model, x)]


def test_local_oracle_scores_on_request(model, rng):
    v = O.LocalOracle(model, return_scores=True).classify(random_images(rng, 1)[0], "a")
    assert len(v.scores) == model.num_classes
    assert sum(v.scores) == pytest.approx(1.0)


def test_local_oracle_rejects_bad_images(model):
    orc = O.LocalOracle(model)
    with pytest.raises(O.UnsupportedImageError):
        orc.classify(np.zeros((9, 9, 3), np.uint8), "a")
    with pytest.raises(ValueError):
        orc.classify(np.full((8, 8, 3), 0.5), "b")
    # rejected inputs are never transmitted
    assert orc.ledger.total == 0


def test_local_oracle_applies_defense(model, rng):
    seen = []
    orc = O.LocalOracle(model, defense=lambda x: seen.append(x) or x)
    orc.classify(random_images(rng, 1)[0], "a")
    assert len(seen) == 1


def test_http_matches_in_process(model, service, rng):
    client = O.HttpOracle(service.url)
    local = O.LocalOracle(model)
    for i, x in enumerate(random_images(rng, 10)):
        assert client.classify(x, f"q{i}").label == local.classify(x, f"q{i}").label
    assert client.ledger.total == 10 and service.ledger.total == 10
    assert service.ledger.count("q3") == 1


def test_service_returns_scores_when_enabled(model, rng):
    with O.serve_mock_service(model, return_scores=True) as svc:
        v = O.HttpOracle(svc.url).classify(random_images(rng, 1)[0], "s")
    assert v.scores is not None and len(v.scores) == model.num_classes


@pytest.mark.parametrize("body", [
    b"not json",
    json.dumps({"image": "x"}).encode(),
    json.dumps({"image_b64": "***not base64***"}).encode(),
    json.dumps({"image_b64": base64.b64encode(b"GIF89a").decode()}).encode(),
])
def test_service_rejects_malformed_requests(service, body):
    r = requests.post(service.url + "/classify", data=body, timeout=5)
    assert r.status_code == 400 and "error" in r.json()
    assert service.ledger.total == 0


def test_service_rejects_wrong_shape(service):
    payload = {"image_b64": base64.b64encode(encode_png(np.zeros((4, 4, 3), np.uint8))).decode()}
    r = requests.post(service.url + "/classify", json=payload, timeout=5)
    assert r.status_code == 400


def test_unknown_route(service):
    assert requests.post(service.url + "/nope", data=b"{}", timeout=5).status_code == 404


def test_http_client_error_mapping(model, service):
    client = O.HttpOracle(service.url)
    with pytest.raises(O.OracleRequestError):
        client.classify(np.zeros((4, 4, 3), np.uint8), "bad")
    dead = O.HttpOracle("http://127.0.0.1:9", timeout=0.5)
    with pytest.raises(O.OracleTransportError):
        dead.classify(np.zeros((8, 8, 3), np.uint8), "x")


def test_bind_string_and_busy_port(model, service):
    host, port = service.address
    with pytest.raises(O.ServiceStartupError):
        O.serve_mock_service(model, f"{host}:{port}")


# ---------------------------------------------------------------- cloud adapters

GOOGLE_BODY = {"responses": [{"labelAnnotations": [
    {"description": "Tabby", "score": 0.7}, {"description": "Cat", "score": 0.9}]}]}


def scripted(*replies):
    calls = []
    replies = list(replies)

    def transport(req):
        calls.append(req)
        return replies.pop(0)

    transport.calls = calls
    return transport


def test_cloud_client_reads_environment():
    orc = O.cloud_client("google", environ={"GOOGLE_API_KEY": "k"}, transport=scripted((200, GOOGLE_BODY)))
    assert orc.classify(np.zeros((8, 8, 3), np.uint8), "a").label == "Cat"


def test_cloud_client_missing_credentials():
    with pytest.raises(O.ConfigurationError):
        O.cloud_client("microsoft", environ={"AZURE_VISION_KEY": "k"})
    with pytest.raises(O.ConfigurationError):
        O.cloud_client("ibm", environ={})


def test_synonyms_canonicalise_top_label():
    orc = O.cloud_client("google", {"GOOGLE_API_KEY": "k"}, transport=scripted((200, GOOGLE_BODY)),
                         synonyms={"feline": ["cat", "felidae"]})
    v = orc.classify(np.zeros((8, 8, 3), np.uint8), "a")
    assert v.label == "feline" and v.raw_label == "Cat"
    assert orc.canonical("Dog") == "Dog"


def test_retry_with_exponential_backoff():
    naps = []
    t = scripted((429, {}), (503, {}), (200, GOOGLE_BODY))
    orc = O.cloud_client("google", {"GOOGLE_API_KEY": "k"}, transport=t, backoff=0.5, sleep=naps.append)
    assert orc.classify(np.zeros((8, 8, 3), np.uint8), "a").label == "Cat"
    assert naps == [0.5, 1.0]
    # every attempt went over the wire
    assert orc.ledger.count("a") == 3


def test_rate_limit_exhaustion():
    orc = O.cloud_client("google", {"GOOGLE_API_KEY": "k"}, transport=scripted(*[(429, {})] * 3),
                         max_attempts=3, sleep=lambda s: None)
    with pytest.raises(O.RateLimitedError):
        orc.classify(np.zeros((8, 8, 3), np.uint8), "a")
    assert orc.ledger.total == 3


def test_vendor_error_is_not_retried():
    orc = O.cloud_client("google", {"GOOGLE_API_KEY": "k"}, transport=scripted((403, {"error": "denied"})))
    with pytest.raises(O.VendorError) as info:
        orc.classify(np.zeros((8, 8, 3), np.uint8), "a")
    assert info.value.status == 403 and orc.ledger.total == 1


@pytest.mark.parametrize("vendor,creds,body,label", [
    ("microsoft", {"AZURE_VISION_KEY": "k", "AZURE_VISION_ENDPOINT": "https://x/"},
     {"tags": [{"name": "dog", "confidence": 0.4}, {"name": "cat", "confidence": 0.8}]}, "cat"),
    ("clarifai", {"CLARIFAI_API_KEY": "k"},
     {"outputs": [{"data": {"concepts": [{"name": "kitten", "value": 0.95}]}}]}, "kitten"),
    ("amazon", {"AWS_ACCESS_KEY_ID": "a", "AWS_SECRET_ACCESS_KEY": "b", "AWS_REGION": "us-east-1"},
     {"Labels": [{"Name": "Cat", "Confidence": 98.0}, {"Name": "Pet", "Confidence": 99.0}]}, "Pet"),
])
def test_vendor_response_parsing(vendor, creds, body, label):
    t = scripted((200, body))
    orc = O.cloud_client(vendor, creds, transport=t)
    assert orc.classify(np.zeros((8, 8, 3), np.uint8), "a").label == label
    req = t.calls[0]
    assert req.method == "POST"


def test_google_request_carries_png():
    t = scripted((200, GOOGLE_BODY))
    x = np.full((8, 8, 3), 7, np.uint8)
    O.cloud_client("google", {"GOOGLE_API_KEY": "k"}, transport=t).classify(x, "a")
    content = t.calls[0].body["requests"][0]["image"]["content"]
    assert base64.b64decode(content) == encode_png(x)


def test_empty_label_list_is_an_error():
    orc = O.cloud_client("microsoft", {"AZURE_VISION_KEY": "k", "AZURE_VISION_ENDPOINT": "https://x"},
                         transport=scripted((200, {"tags": []})))
    with pytest.raises(O.VendorError):
        orc.classify(np.zeros((8, 8, 3), np.uint8), "a")
