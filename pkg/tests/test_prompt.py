import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from madiff.prompt import (
    EmbeddingTable,
    LlmClient,
    MaskPrompt,
    PromptText,
    ShapeVocabulary,
    embed_prompt,
    extract_mask_prompt,
    load_vocabulary,
    tokenize,
)

SMALL_VOCAB = ShapeVocabulary({"long", "sleeve", "t-shirt", "collar", "short"})


def test_tokenize_keeps_inner_hyphens():
    assert tokenize("A Yellow, long-sleeve T-shirt!") == ["a", "yellow", "long-sleeve", "t-shirt"]


def test_extract_shape_words():
    mp = extract_mask_prompt(PromptText("a yellow long sleeve t-shirt"), SMALL_VOCAB)
    assert mp.text == "long sleeve t-shirt"


def test_extract_no_shape_words():
    assert extract_mask_prompt("a bright red one", SMALL_VOCAB) == MaskPrompt(())


def test_shipped_vocabulary():
    vocab = load_vocabulary()
    assert {"t-shirt", "sleeve", "long", "dress", "pants"} <= vocab
    assert "red" not in vocab and "striped" not in vocab


def test_vocabulary_file_with_comments(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("# shapes\nSleeve\n\nneck  # trailing\n")
    assert load_vocabulary(p) == {"sleeve", "neck"}


class _Handler(BaseHTTPRequestHandler):
    reply = {}

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        self.server.seen.append(body)
        data = json.dumps(self.reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def llm_server():
    servers = []

    def start(reply):
        handler = type("H", (_Handler,), {"reply": reply})
        srv = HTTPServer(("127.0.0.1", 0), handler)
        srv.seen = []
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return srv, f"http://127.0.0.1:{srv.server_address[1]}/mask"

    yield start
    for srv in servers:
        srv.shutdown()
        srv.server_close()


def test_client_answer_accepted(llm_server):
    srv, url = llm_server({"mask_prompt": "long t-shirt"})
    mp = extract_mask_prompt("a yellow long sleeve t-shirt", SMALL_VOCAB, LlmClient(url))
    assert mp.text == "long t-shirt"
    assert srv.seen == [{"prompt": "a yellow long sleeve t-shirt"}]


def test_client_answer_outside_prompt_rejected(llm_server):
    _, url = llm_server({"mask_prompt": "short sleeve dress"})
    mp = extract_mask_prompt("a yellow long sleeve t-shirt", SMALL_VOCAB, LlmClient(url))
    assert mp.text == "long sleeve t-shirt"


def test_client_malformed_reply_falls_back(llm_server):
    _, url = llm_server({"unexpected": 1})
    mp = extract_mask_prompt("a long t-shirt", SMALL_VOCAB, LlmClient(url))
    assert mp.text == "long t-shirt"


def test_client_unreachable_falls_back():
    client = LlmClient("http://127.0.0.1:9/none", timeout=0.5)
    assert extract_mask_prompt("short sleeve", SMALL_VOCAB, client).text == "short sleeve"


def test_client_from_env(monkeypatch):
    monkeypatch.delenv("MADIFF_LLM_ENDPOINT", raising=False)
    assert LlmClient.from_config() is None
    monkeypatch.setenv("MADIFF_LLM_ENDPOINT", "http://example.invalid/x")
    assert LlmClient.from_config().endpoint == "http://example.invalid/x"


def test_embed_empty_is_zero():
    emb = embed_prompt([], EmbeddingTable(8))
    np.testing.assert_array_equal(emb.vector, np.zeros(8))


def test_embed_single_token():
    table = EmbeddingTable(8)
    np.testing.assert_array_equal(embed_prompt(["red"], table).vector, table.vector("red"))


def test_embed_mean_of_two():
    table = EmbeddingTable(16, seed=3)
    a, b = table.vector("red"), table.vector("shirt")
    expected = [(x + y) / 2 for x, y in zip(a, b)]
    np.testing.assert_allclose(embed_prompt(["red", "shirt"], table).vector, expected, atol=1e-15)


def test_table_is_stable_across_instances():
    assert EmbeddingTable(8).vector("dress").tobytes() == EmbeddingTable(8).vector("dress").tobytes()
    assert not np.array_equal(EmbeddingTable(8, seed=1).vector("dress"), EmbeddingTable(8).vector("dress"))


def test_embedding_key_normalizes():
    assert embed_prompt(PromptText("A Red  Shirt."), EmbeddingTable()).key == "a red shirt"
