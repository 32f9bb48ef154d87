"""Synthetic grounded bilingual world.

A scene is a subject group (count, color, class, action) optionally related
to a second object group.  Each language realizes a scene through its own
deterministic grammar, and the scene's objects are rendered as noisy
attribute-conditioned feature vectors with relation-dependent boxes.  The two
grammars are bijective over scenes, so every sentence has exactly one
translation; that pairing is used only for evaluation references.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ..visual import ImageObjects


@dataclass(frozen=True)
class Scene:
    count: int
    color: str
    cls: str
    action: str
    relation: str | None = None
    count2: int | None = None
    color2: str | None = None
    cls2: str | None = None

    def key(self) -> tuple:
        return (self.count, self.color, self.cls, self.action, self.relation, self.count2, self.color2, self.cls2)


@dataclass
class ToyWorldSpec:
    colors: tuple = ("red", "blue", "green", "yellow", "black", "white")
    classes: tuple = ("dog", "cat", "man", "woman", "horse", "bird", "car", "ball")
    actions: tuple = ("runs", "sleeps", "jumps", "waits", "plays")
    counts: tuple = (1, 2, 3)
    relations: tuple = ("near", "behind", "under")
    languages: tuple = ("en", "fr")
    feature_dim: int = 32
    noise: float = 0.6
    action_scale: float = 0.6
    p_relation: float = 0.6
    p_color2: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorldSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# -- lexicons ---------------------------------------------------------------

_EN_NOUN = {
    "dog": ("dog", "dogs"), "cat": ("cat", "cats"), "man": ("man", "men"), "woman": ("woman", "women"),
    "horse": ("horse", "horses"), "bird": ("bird", "birds"), "car": ("car", "cars"), "ball": ("ball", "balls"),
}
_EN_VERB = {
    "runs": ("runs", "run"), "sleeps": ("sleeps", "sleep"), "jumps": ("jumps", "jump"),
    "waits": ("waits", "wait"), "plays": ("plays", "play"),
}
_EN_DET = {1: "a", 2: "two", 3: "three"}

# noun: (singular, plural, gender)
_FR_NOUN = {
    "dog": ("chien", "chiens", "m"), "cat": ("chat", "chats", "m"), "man": ("homme", "hommes", "m"),
    "woman": ("femme", "femmes", "f"), "horse": ("cheval", "chevaux", "m"), "bird": ("oiseau", "oiseaux", "m"),
    "car": ("voiture", "voitures", "f"), "ball": ("balle", "balles", "f"),
}
# color: forms indexed by (gender, plural)
_FR_ADJ = {
    "red": {("m", 0): "rouge", ("f", 0): "rouge", ("m", 1): "rouges", ("f", 1): "rouges"},
    "blue": {("m", 0): "bleu", ("f", 0): "bleue", ("m", 1): "bleus", ("f", 1): "bleues"},
    "green": {("m", 0): "vert", ("f", 0): "verte", ("m", 1): "verts", ("f", 1): "vertes"},
    "yellow": {("m", 0): "jaune", ("f", 0): "jaune", ("m", 1): "jaunes", ("f", 1): "jaunes"},
    "black": {("m", 0): "noir", ("f", 0): "noire", ("m", 1): "noirs", ("f", 1): "noires"},
    "white": {("m", 0): "blanc", ("f", 0): "blanche", ("m", 1): "blancs", ("f", 1): "blanches"},
}
_FR_VERB = {
    "runs": ("court", "courent"), "sleeps": ("dort", "dorment"), "jumps": ("saute", "sautent"),
    "waits": ("attend", "attendent"), "plays": ("joue", "jouent"),
}
_FR_REL = {"near": "près", "behind": "derrière", "under": "sous"}


def _fr_det(count: int, gender: str) -> str:
    if count == 1:
        return "un" if gender == "m" else "une"
    return {2: "deux", 3: "trois"}[count]


def _en_group(count, color, cls):
    words = [_EN_DET[count]]
    if color is not None:
        words.append(color)
    words.append(_EN_NOUN[cls][0 if count == 1 else 1])
    return words


def _fr_group(count, color, cls):
    sg, pl, gender = _FR_NOUN[cls]
    words = [_fr_det(count, gender), sg if count == 1 else pl]
    if color is not None:
        words.append(_FR_ADJ[color][(gender, int(count > 1))])
    return words


def realize(scene: Scene, lang: str) -> list[str]:
    """Render a scene as a token list in ``lang``."""
    if lang == "en":
        words = _en_group(scene.count, scene.color, scene.cls)
        words.append(_EN_VERB[scene.action][0 if scene.count == 1 else 1])
        if scene.relation:
            words.append(scene.relation)
            words += _en_group(scene.count2, scene.color2, scene.cls2)
        return words
    if lang == "fr":
        words = _fr_group(scene.count, scene.color, scene.cls)
        words.append(_FR_VERB[scene.action][0 if scene.count == 1 else 1])
        if scene.relation:
            words.append(_FR_REL[scene.relation])
            words += _fr_group(scene.count2, scene.color2, scene.cls2)
        return words
    raise ValueError(f"unknown language {lang!r}")


def _inverse_tables():
    tables = {"en": {}, "fr": {}}
    en, fr = tables["en"], tables["fr"]
    en["det"] = {v: k for k, v in _EN_DET.items()}
    en["noun"] = {forms[i]: (c, i) for c, forms in _EN_NOUN.items() for i in (0, 1)}
    en["verb"] = {forms[i]: (a, i) for a, forms in _EN_VERB.items() for i in (0, 1)}
    fr["det"] = {"un": (1, "m"), "une": (1, "f"), "deux": (2, None), "trois": (3, None)}
    fr["noun"] = {forms[i]: (c, i, forms[2]) for c, forms in _FR_NOUN.items() for i in (0, 1)}
    fr["adj"] = {}
    for color, forms in _FR_ADJ.items():
        for (g, pl), w in forms.items():
            fr["adj"].setdefault(w, set()).add((color, g, pl))
    fr["verb"] = {forms[i]: (a, i) for a, forms in _FR_VERB.items() for i in (0, 1)}
    fr["rel"] = {v: k for k, v in _FR_REL.items()}
    return tables


_INV = _inverse_tables()


class ParseError(ValueError):
    pass


def _parse_en_group(words, pos, colors):
    det = _INV["en"]["det"].get(words[pos]) if pos < len(words) else None
    if det is None:
        raise ParseError(f"expected determiner at {pos}")
    pos += 1
    color = None
    if pos < len(words) and words[pos] in colors:
        color = words[pos]
        pos += 1
    noun = _INV["en"]["noun"].get(words[pos]) if pos < len(words) else None
    if noun is None or noun[1] != int(det > 1):
        raise ParseError(f"bad noun at {pos}")
    return det, color, noun[0], pos + 1


def _parse_fr_group(words, pos):
    det = _INV["fr"]["det"].get(words[pos]) if pos < len(words) else None
    if det is None:
        raise ParseError(f"expected determiner at {pos}")
    count, dg = det
    pos += 1
    noun = _INV["fr"]["noun"].get(words[pos]) if pos < len(words) else None
    if noun is None or noun[1] != int(count > 1) or (dg is not None and dg != noun[2]):
        raise ParseError(f"bad noun at {pos}")
    cls, _, gender = noun
    pos += 1
    color = None
    if pos < len(words) and words[pos] in _INV["fr"]["adj"]:
        for c, g, pl in _INV["fr"]["adj"][words[pos]]:
            if g == gender and pl == int(count > 1):
                color = c
        if color is None:
            raise ParseError(f"adjective agreement at {pos}")
        pos += 1
    return count, color, cls, pos


def parse(words: list[str], lang: str, spec: ToyWorldSpec | None = None) -> Scene:
    """Inverse of :func:`realize`."""
    spec = spec or ToyWorldSpec()
    if lang == "en":
        count, color, cls, pos = _parse_en_group(words, 0, set(spec.colors))
        verb = _INV["en"]["verb"].get(words[pos]) if pos < len(words) else None
        if verb is None or verb[1] != int(count > 1):
            raise ParseError("bad verb")
        pos += 1
        if pos == len(words):
            return Scene(count, color, cls, verb[0])
        rel = words[pos]
        if rel not in spec.relations:
            raise ParseError("bad relation")
        c2, col2, cls2, pos = _parse_en_group(words, pos + 1, set(spec.colors))
    elif lang == "fr":
        count, color, cls, pos = _parse_fr_group(words, 0)
        verb = _INV["fr"]["verb"].get(words[pos]) if pos < len(words) else None
        if verb is None or verb[1] != int(count > 1):
            raise ParseError("bad verb")
        pos += 1
        if pos == len(words):
            return Scene(count, color, cls, verb[0])
        rel = _INV["fr"]["rel"].get(words[pos])
        if rel is None:
            raise ParseError("bad relation")
        c2, col2, cls2, pos = _parse_fr_group(words, pos + 1)
    else:
        raise ValueError(f"unknown language {lang!r}")
    if pos != len(words):
        raise ParseError("trailing tokens")
    if color is None:
        raise ParseError("subject color missing")
    return Scene(count, color, cls, verb[0], rel, c2, col2, cls2)


def lexicon(lang: str) -> set[str]:
    """Every word the grammar of ``lang`` can emit."""
    if lang == "en":
        words = set(_EN_DET.values()) | {w for f in _EN_NOUN.values() for w in f} | {w for f in _EN_VERB.values() for w in f}
        return words | set(ToyWorldSpec().colors) | set(ToyWorldSpec().relations)
    if lang == "fr":
        words = {"un", "une", "deux", "trois"} | {w for f in _FR_NOUN.values() for w in f[:2]}
        words |= {w for forms in _FR_ADJ.values() for w in forms.values()}
        return words | {w for f in _FR_VERB.values() for w in f} | set(_FR_REL.values())
    raise ValueError(lang)


# -- world generation ---------------------------------------------------------

@dataclass
class Entry:
    image_id: str
    split: str
    scene: Scene
    sentences: dict = field(default_factory=dict)


@dataclass
class Corpus:
    languages: tuple
    entries: list
    images: dict
    spec: ToyWorldSpec | None = None

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def by_id(self) -> dict[str, Entry]:
        return {e.image_id: e for e in self.entries}

    def sentences(self, lang: str, split: str | None = None) -> list[list[str]]:
        return [e.sentences[lang] for e in self.entries if split is None or e.split == split]


class WorldTooSmall(ValueError):
    pass


def scene_space_size(spec: ToyWorldSpec) -> int:
    nc, ncl, na, nk, nr = len(spec.colors), len(spec.classes), len(spec.actions), len(spec.counts), len(spec.relations)
    single = nk * nc * ncl * na
    second = nk * (nc + 1) * ncl
    return single + single * nr * second


def _sample_scene(rng: np.random.Generator, spec: ToyWorldSpec) -> Scene:
    count = int(rng.choice(spec.counts))
    color = str(rng.choice(spec.colors))
    cls = str(rng.choice(spec.classes))
    action = str(rng.choice(spec.actions))
    if rng.random() >= spec.p_relation:
        return Scene(count, color, cls, action)
    rel = str(rng.choice(spec.relations))
    count2 = int(rng.choice(spec.counts[:2]))
    color2 = str(rng.choice(spec.colors)) if rng.random() < spec.p_color2 else None
    cls2 = str(rng.choice(spec.classes))
    return Scene(count, color, cls, action, rel, count2, color2, cls2)


def attribute_vectors(spec: ToyWorldSpec) -> dict[str, dict[str, np.ndarray]]:
    """Unit-scale random directions per attribute value, fixed by the world seed."""
    rng = np.random.default_rng([spec.seed, 7919])
    F = spec.feature_dim

    def table(values):
        return {v: rng.normal(0.0, 1.0 / np.sqrt(F), size=F) for v in values}

    return {"class": table(spec.classes), "color": table(spec.colors), "action": table(spec.actions)}


def _boxes(rng, n, region):
    x0, y0, x1, y1 = region
    out = []
    for _ in range(n):
        w = rng.uniform(0.1, 0.25) * (x1 - x0) / 0.5
        h = rng.uniform(0.1, 0.25) * (y1 - y0) / 0.5
        w, h = min(w, x1 - x0), min(h, y1 - y0)
        bx = rng.uniform(x0, x1 - w)
        by = rng.uniform(y0, y1 - h)
        out.append([bx, by, bx + w, by + h])
    return out


_REGIONS = {
    None: ((0.0, 0.0, 1.0, 1.0), None),
    "near": ((0.0, 0.25, 0.48, 0.75), (0.52, 0.25, 1.0, 0.75)),
    "behind": ((0.3, 0.0, 0.7, 0.35), (0.15, 0.3, 0.85, 1.0)),
    "under": ((0.1, 0.55, 0.9, 1.0), (0.1, 0.0, 0.9, 0.45)),
}


def render_image(scene: Scene, image_id: str, spec: ToyWorldSpec, vecs, rng: np.random.Generator) -> ImageObjects:
    """Object features = attribute directions + Gaussian noise; boxes encode the relation."""
    F = spec.feature_dim
    sigma = spec.noise / np.sqrt(F)
    feats, boxes = [], []
    subj_region, obj_region = _REGIONS[scene.relation]
    base = vecs["class"][scene.cls] + vecs["color"][scene.color] + spec.action_scale * vecs["action"][scene.action]
    for b in _boxes(rng, scene.count, subj_region):
        feats.append(base + rng.normal(0.0, sigma, size=F))
        boxes.append(b)
    if scene.relation:
        base2 = vecs["class"][scene.cls2].copy()
        if scene.color2 is not None:
            base2 = base2 + vecs["color"][scene.color2]
        for b in _boxes(rng, scene.count2, obj_region):
            feats.append(base2 + rng.normal(0.0, sigma, size=F))
            boxes.append(b)
    order = rng.permutation(len(feats))
    return ImageObjects(image_id, np.array(feats)[order], np.clip(np.array(boxes)[order], 0.0, 1.0))


def generate_world(spec: ToyWorldSpec | None = None, sizes: dict | None = None) -> Corpus:
    """Sample distinct scenes for each split and render sentences and images.

    Deterministic given ``spec.seed``.  Scenes are distinct across all splits.
    """
    spec = spec or ToyWorldSpec()
    sizes = sizes or {"train": 1000, "valid": 200, "test": 100}
    if not spec.colors or not spec.classes or not spec.actions or not spec.counts:
        raise ValueError("attribute inventory must be nonempty")
    if any(n <= 0 for n in sizes.values()):
        raise ValueError("split sizes must be positive")
    total = sum(sizes.values())
    if total > scene_space_size(spec) // 4:
        raise WorldTooSmall(f"{total} distinct scenes requested from a space of {scene_space_size(spec)}")
    rng = np.random.default_rng(spec.seed)
    vecs = attribute_vectors(spec)
    seen: set = set()
    entries, images = [], {}
    idx = 0
    for split, n in sizes.items():
        made = 0
        attempts = 0
        while made < n:
            attempts += 1
            if attempts > 50 * n:
                raise WorldTooSmall(f"could not sample {n} distinct scenes for {split}")
            scene = _sample_scene(rng, spec)
            if scene.key() in seen:
                continue
            seen.add(scene.key())
            image_id = f"img{idx:05d}"
            idx += 1
            made += 1
            sub = np.random.default_rng(int.from_bytes(hashlib.sha256(f"{spec.seed}/{image_id}".encode()).digest()[:8], "little"))
            images[image_id] = render_image(scene, image_id, spec, vecs, sub)
            entries.append(Entry(image_id, split, scene, {lang: realize(scene, lang) for lang in spec.languages}))
    return Corpus(tuple(spec.languages), entries, images, spec)
