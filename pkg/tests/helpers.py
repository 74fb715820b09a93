"""Fixture builders shared by the test modules."""

from codecaps.codecap import Codecap, authorize, delegate, mint_root, sign_request
from codecaps.directory import dir_insert
from codecaps.objectsvc import ObjectService, PrimaryLink, ServiceConfig
from codecaps.wire import LoopbackEndpoint, Server
from oracles import TABLE_RIGHTS, request_attrs

NOW = 1_700_000_000


class ChainBuilder:
    """Builds table-rights chains P0 -> P1 -> P2 -> P3, memoizing prefixes."""

    def __init__(self, keys, max_len=3):
        self.keys = keys
        self.max_len = max_len
        self._cache = {}

    def heritage(self, indices, rights=None):
        indices = tuple(indices)
        if indices in self._cache:
            return self._cache[indices]
        src = rights or (lambda i: TABLE_RIGHTS[i][0])
        n = len(indices)
        if n == 1:
            h = mint_root(self.keys[0], self.keys[1].public_key, src(indices[0]), self.max_len, "obj", 0)
        else:
            parent = self.heritage(indices[:-1], rights)
            h = delegate(Codecap(parent, self.keys[n - 1]), self.keys[n].public_key, src(indices[-1]), self.max_len - n + 1)
        if rights is None:
            self._cache[indices] = h
        return h

    def codecap(self, indices):
        h = self.heritage(indices)
        return Codecap(h, self.keys[len(indices)])


def decide(keys, c: Codecap, req, signer=None, **kw):
    """authorize for a request tuple from the universe, over a bound transport."""
    signer = signer or c
    r = sign_request(signer, request_attrs(req), now=NOW, nonce="n")
    kw.setdefault("transport_pub", c.key.public_key)
    return authorize(keys[0].public_key, c.heritage, r, now=NOW, **kw)


class Site:
    """An in-process object service wired into a shared network."""

    def __init__(self, net, key, subject, store_dir=None, **cfg):
        self.key = key
        self.svc = ObjectService(ServiceConfig(key, subject=subject, **cfg), store_dir=store_dir, network=net)
        self.server = Server(self.svc)
        self.endpoint = LoopbackEndpoint(self.server)
        net.register(key.public_key, self.endpoint)


class GCWorld:
    """Object host S plus directory host D, with object o linked from D's row "o".

    Alice owns both the object and the directory.  The stored row cap is
    Alice's object cap delegated to D; S holds a LOOKUP-only cap on the
    directory delegated to S.
    """

    def __init__(self, net, keys):
        self.net = net
        self.alice = keys[1]
        self.S = Site(net, keys[0], "S")
        self.D = Site(net, keys[3], "D")
        self.oid = self.S.svc.new_object(state=b"payload")
        self.obj_cap = Codecap(self.S.svc.mint(self.alice.public_key, "true", 4, self.oid), self.alice)
        self.dir_id = self.D.svc.new_object("directory", groups=["gc", "users"])
        self.dir_cap = Codecap(self.D.svc.mint(self.alice.public_key, "true", 4, self.dir_id), self.alice)
        stored = delegate(self.obj_cap, self.D.key.public_key, "true", 3)
        dir_insert(net, self.dir_cap, "o", stored, {"gc": "true", "users": 'request.type == "READ"'})
        self.link_cap = delegate(self.dir_cap, self.S.key.public_key, 'request.type == "LOOKUP"', 3)
        self.S.svc.add_primary_link(self.oid, PrimaryLink(self.link_cap, "o", "gc"))
