"""Generates the NIB16 fixture bundle, scripted transcripts and run configs.

Run from anywhere: `python3 fixtures/gen_fixtures.py`. Output is deterministic.
"""

import json
import os
import sys

from PIL import Image, ImageDraw

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, HERE)
import reference as ref  # noqa: E402

OUT = os.path.join(HERE, "nib16")
BUNDLE = os.path.join(OUT, "bundle")
FENCE = "*" * 20

PLAN = ["SubNibbles", "ShiftState", "MixState", "AddRoundKey", "Cipher"]
DEPS = {"Cipher": ["SubNibbles", "ShiftState", "MixState", "AddRoundKey"]}


def h(v):
    return f"0x{v:04X}"


# ---------------------------------------------------------------- document

DOC_VECTORS = [(0x0000, 0x0000), (0x1234, 0xABCD), (0xFFFF, 0x0F0F)]
GOLDEN_INPUTS = [
    (0x0000, 0x0000), (0x0001, 0x0000), (0x0000, 0x0001), (0xFFFF, 0xFFFF),
    (0x1234, 0xABCD), (0xBEEF, 0x1357), (0x8000, 0x7FFF), (0x0F0F, 0xF0F0),
]

SECTIONS = [
    ("overview", "Overview",
     "NIB16 is a toy block cipher used to exercise the toolchain. It encrypts a 16-bit plaintext "
     "under a 16-bit key in four rounds. The state is a 16-bit word viewed as four 4-bit nibbles; "
     "nibble 0 is the least significant. All arithmetic is on 16-bit unsigned words.\n\n"
     "Notation: rotl16(x, n) rotates the 16-bit word x left by n bit positions. XOR is written ^.\n",
     None),
    ("subnibbles", "SubNibbles",
     "SubNibbles replaces each of the four nibbles of the state with its image under the 4-bit "
     "S-box S, independently of the other nibbles. The S-box is given in Table 1 and, in "
     "hexadecimal, S = [C, 5, 6, B, 9, 0, A, D, 3, E, F, 8, 4, 7, 1, 2], where entry i is S(i).\n\n"
     f"Worked example: SubNibbles(0x0123) = {h(ref.sub_nibbles(0x0123))}.\n"
     f"Worked example: SubNibbles(0x4567) = {h(ref.sub_nibbles(0x4567))}.\n",
     ("tables/sbox.png", "Table 1: the NIB16 S-box.")),
    ("shiftstate", "ShiftState",
     "ShiftState moves bits across nibble boundaries: the output is rotl16(s, 5).\n\n"
     f"Worked example: ShiftState(0x0001) = {h(ref.shift_state(0x0001))}.\n"
     f"Worked example: ShiftState(0x8000) = {h(ref.shift_state(0x8000))}.\n",
     None),
    ("mixstate", "MixState",
     "MixState diffuses each bit into a second position: the output is s ^ rotl16(s, 6).\n\n"
     f"Worked example: MixState(0x0001) = {h(ref.mix_state(0x0001))}.\n"
     f"Worked example: MixState(0x0400) = {h(ref.mix_state(0x0400))}.\n",
     None),
    ("addroundkey", "AddRoundKey",
     "AddRoundKey combines the state with a 16-bit round key by bitwise XOR: the output is s ^ rk.\n\n"
     f"Worked example: AddRoundKey(0x1234, 0x00FF) = {h(ref.add_round_key(0x1234, 0x00FF))}.\n",
     None),
    ("cipher", "Key schedule and encryption",
     "The round key for round r, for r = 1, 2, 3, 4, is rk_r = rotl16(key, 3*r) ^ r.\n\n"
     "Cipher(pt, key) first sets s = pt ^ key. Each round r = 1..4 then applies SubNibbles, "
     "ShiftState, MixState and AddRoundKey with rk_r, in that order, except that the last round "
     "(r = 4) omits MixState. The ciphertext is the final state.\n\n"
     "Test vectors (also in Table 2):\n"
     + "".join(f"Cipher({h(p)}, {h(k)}) = {h(ref.cipher(p, k))}\n" for p, k in DOC_VECTORS),
     ("tables/vectors.png", "Table 2: NIB16 test vectors.")),
]
SECTION_TEXT = {sid: body for sid, _, body, _ in SECTIONS}


def render_table(path, rows):
    w, line_h = 360, 18
    img = Image.new("RGB", (w, 12 + line_h * len(rows)), "white")
    d = ImageDraw.Draw(img)
    for i, row in enumerate(rows):
        d.text((8, 6 + i * line_h), row, fill="black")
    img.save(path, format="PNG", optimize=False)


def write_bundle():
    os.makedirs(os.path.join(BUNDLE, "sections"), exist_ok=True)
    os.makedirs(os.path.join(BUNDLE, "tables"), exist_ok=True)
    manifest = {"format_version": 1, "doc_id": "nib16-toy", "title": "NIB16 toy block cipher", "sections": []}
    for sid, heading, body, att in SECTIONS:
        rel = f"sections/{sid}.txt"
        with open(os.path.join(BUNDLE, rel), "w") as f:
            f.write(body)
        rec = {"section_id": sid, "heading": heading, "text": rel, "attachments": []}
        if att:
            rec["attachments"].append({"kind": "TABLE", "path": att[0], "caption": att[1]})
        manifest["sections"].append(rec)
    with open(os.path.join(BUNDLE, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    render_table(os.path.join(BUNDLE, "tables/sbox.png"),
                 ["x    : " + " ".join(f"{i:X}" for i in range(16)),
                  "S(x) : " + " ".join(f"{v:X}" for v in ref.SBOX)])
    render_table(os.path.join(BUNDLE, "tables/vectors.png"),
                 ["pt     key    ct"] + [f"{h(p)} {h(k)} {h(ref.cipher(p, k))}" for p, k in DOC_VECTORS])
    golden = {
        "entry": "Cipher",
        "cases": [
            {"id": f"g{i + 1}", "inputs": [h(p), h(k)], "expected": [h(ref.cipher(p, k))]}
            for i, (p, k) in enumerate(GOLDEN_INPUTS)
        ],
    }
    with open(os.path.join(BUNDLE, "golden.json"), "w") as f:
        json.dump(golden, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------- agent replies

def port(name, desc):
    return {"name": name, "type_description": desc, "shape_or_width": "16 bits"}


def spec(name, inputs, functionality, section, quote):
    assert quote in SECTION_TEXT[section], f"quote for {name} not in {section}"
    return {
        "name": name,
        "inputs": inputs,
        "outputs": [port("y", "unsigned result word")],
        "functionality": functionality,
        "side_effect_only": False,
        "references": [{"section_id": section, "quote": quote}],
    }


SPECS = {
    "SubNibbles": spec("SubNibbles", [port("s", "unsigned state word")],
                       "Replace each 4-bit nibble of s by S(nibble), S = [C,5,6,B,9,0,A,D,3,E,F,8,4,7,1,2].",
                       "subnibbles", "replaces each of the four nibbles of the state with its image under the 4-bit S-box S"),
    "ShiftState": spec("ShiftState", [port("s", "unsigned state word")],
                       "y = rotl16(s, 5).", "shiftstate", "the output is rotl16(s, 5)"),
    "MixState": spec("MixState", [port("s", "unsigned state word")],
                     "y = s ^ rotl16(s, 6).", "mixstate", "the output is s ^ rotl16(s, 6)"),
    "AddRoundKey": spec("AddRoundKey", [port("s", "unsigned state word"), port("rk", "unsigned round key")],
                        "y = s ^ rk.", "addroundkey", "combines the state with a 16-bit round key by bitwise XOR"),
    "Cipher": spec("Cipher", [port("pt", "unsigned plaintext"), port("key", "unsigned key")],
                   "s = pt ^ key; for r in 1..4: s = SubNibbles(s); s = ShiftState(s); if r < 4: s = MixState(s); "
                   "s = AddRoundKey(s, rotl16(key, 3*r) ^ r). Return s.",
                   "cipher", "Cipher(pt, key) first sets s = pt ^ key"),
}
WRONG_MIX_SPEC = spec("MixState", [port("s", "unsigned state word")],
                      "y = s ^ rotl16(s, 4).", "mixstate", "MixState diffuses each bit into a second position")

SPEC_CASES = {
    "SubNibbles": [([0x0123], ref.sub_nibbles(0x0123)), ([0x4567], ref.sub_nibbles(0x4567))],
    "ShiftState": [([0x0001], ref.shift_state(0x0001)), ([0x8000], ref.shift_state(0x8000))],
    "MixState": [([0x0001], ref.mix_state(0x0001)), ([0x0400], ref.mix_state(0x0400))],
    "AddRoundKey": [([0x1234, 0x00FF], ref.add_round_key(0x1234, 0x00FF))],
    "Cipher": [([p, k], ref.cipher(p, k)) for p, k in DOC_VECTORS],
}
# SubNibbles inputs deliberately avoid nibble F.
HL_INPUTS = {
    "SubNibbles": [[0x3210], [0x89AB], [0xCDE0], [0x0000]],
    "ShiftState": [[0x0001], [0xFFFF], [0x8421], [0x1234]],
    "MixState": [[0x0400], [0xFFFF], [0x8001], [0x1234], [0xF000]],
    "AddRoundKey": [[0x1234, 0x00FF], [0xFFFF, 0x0F0F]],
    "Cipher": [[0x1234, 0xABCD], [0xFFFF, 0xFFFF], [0x0F0F, 0xF0F0]],
}

# SPEC-origin cases must be lifted from the section text.
for _name, _cases in SPEC_CASES.items():
    for _inputs, _out in _cases:
        _text = SECTION_TEXT[SPECS[_name]["references"][0]["section_id"]]
        assert all(h(v) in _text for v in _inputs + [_out]), _name


def cases_reply(cases):
    body = {"cases": [{"inputs": [h(i) for i in ins], "expected": [h(out)]} for ins, out in cases]}
    return "Cases copied from the worked examples.\n```json\n" + json.dumps(body) + "\n```\n"


def inputs_reply(inputs):
    body = {"cases": [{"inputs": [h(i) for i in ins]} for ins in inputs]}
    return "```json\n" + json.dumps(body) + "\n```\n"


def fenced(name, body):
    return f"{FENCE}\nSUBFUNCTION: {name}\n{body}{FENCE}\n"


PSEUDO = {
    "SubNibbles": "FUNCTION SubNibbles(s)\n  y <- 0\n  FOR i FROM 0 TO 3\n    y <- y OR (S[(s >> 4*i) AND 0xF] << 4*i)\n  END FOR\n  RETURN y\nEND FUNCTION\n",
    "ShiftState": "FUNCTION ShiftState(s)\n  RETURN rotl16(s, 5)\nEND FUNCTION\n",
    "MixState": "FUNCTION MixState(s)\n  RETURN s XOR rotl16(s, 6)\nEND FUNCTION\n",
    "AddRoundKey": "FUNCTION AddRoundKey(s, rk)\n  RETURN s XOR rk\nEND FUNCTION\n",
    "Cipher": "FUNCTION Cipher(pt, key)\n  s <- pt XOR key\n  FOR r FROM 1 TO 4\n    s <- ShiftState(SubNibbles(s))\n    IF r < 4 THEN s <- MixState(s)\n    s <- AddRoundKey(s, rotl16(key, 3*r) XOR r)\n  END FOR\n  RETURN s\nEND FUNCTION\n",
}


def sbox_list(sbox):
    return ", ".join(f"0x{v:X}" for v in sbox)


def py_sub(sbox=ref.SBOX):
    return (
        "def SubNibbles(s):\n"
        f"    sbox = [{sbox_list(sbox)}]\n"
        "    out = 0\n"
        "    for i in range(4):\n"
        "        out |= sbox[(s >> (4 * i)) & 0xF] << (4 * i)\n"
        "    return out\n"
    )


SCRIPT = {
    "SubNibbles": py_sub(),
    "ShiftState": "def ShiftState(s):\n    return ((s << 5) | (s >> 11)) & 0xFFFF\n",
    "MixState": "def MixState(s):\n    return (s ^ ((s << 6) | (s >> 10))) & 0xFFFF\n",
    "AddRoundKey": "def AddRoundKey(s, rk):\n    return (s ^ rk) & 0xFFFF\n",
    "Cipher": (
        "def Cipher(pt, key):\n"
        "    s = (pt ^ key) & 0xFFFF\n"
        "    for r in range(1, 5):\n"
        "        s = SubNibbles(s)\n"
        "        s = ShiftState(s)\n"
        "        if r < 4:\n"
        "            s = MixState(s)\n"
        "        rk = (((key << (3 * r)) | (key >> (16 - 3 * r))) & 0xFFFF) ^ r\n"
        "        s = AddRoundKey(s, rk)\n"
        "    return s\n"
    ),
}


def cpp_sub(sbox=ref.SBOX):
    return (
        "uint16_t SubNibbles(uint16_t s) {\n"
        f"    static const uint8_t sbox[16] = {{{sbox_list(sbox)}}};\n"
        "    uint16_t out = 0;\n"
        "    for (uint8_t i = 0; i < 4; i++) {\n"
        "        out |= (uint16_t)(sbox[(s >> (4 * i)) & 0xF] << (4 * i));\n"
        "    }\n"
        "    return out;\n"
        "}\n"
    )


MIX_WITH_INT = (
    "uint16_t MixState(uint16_t s) {\n"
    "    unsigned int r = ((unsigned int)s << 6) | (s >> 10);\n"
    "    return (uint16_t)(s ^ (r & 0xFFFF));\n"
    "}\n"
)
MIX_BROKEN = (
    "uint16_t MixState(uint16_t s) {\n"
    "    return (uint16_t)(s ^ (uint16_t)(s << 6));\n"
    "}\n"
)

SYNTH = {
    "SubNibbles": cpp_sub(),
    "ShiftState": "uint16_t ShiftState(uint16_t s) {\n    return (uint16_t)((s << 5) | (s >> 11));\n}\n",
    "MixState": "uint16_t MixState(uint16_t s) {\n    return (uint16_t)(s ^ (uint16_t)((s << 6) | (s >> 10)));\n}\n",
    "AddRoundKey": "uint16_t AddRoundKey(uint16_t s, uint16_t rk) {\n    return (uint16_t)(s ^ rk);\n}\n",
    "Cipher": (
        "uint16_t Cipher(uint16_t pt, uint16_t key) {\n"
        "    uint16_t s = (uint16_t)(pt ^ key);\n"
        "    for (uint8_t r = 1; r <= 4; r++) {\n"
        "        s = SubNibbles(s);\n"
        "        s = ShiftState(s);\n"
        "        if (r < 4) {\n"
        "            s = MixState(s);\n"
        "        }\n"
        "        uint16_t rk = (uint16_t)(((key << (3 * r)) | (key >> (16 - 3 * r))) ^ r);\n"
        "        s = AddRoundKey(s, rk);\n"
        "    }\n"
        "    return s;\n"
        "}\n"
    ),
}

SUMMARIES = {
    "overview": "NIB16: 16-bit block, 16-bit key, four rounds over four 4-bit nibbles; rotl16 is a 16-bit left rotation.",
    "subnibbles": "SubNibbles maps each nibble through S = [C,5,6,B,9,0,A,D,3,E,F,8,4,7,1,2] (Table 1).",
    "shiftstate": "ShiftState returns rotl16(s, 5).",
    "mixstate": "MixState returns s ^ rotl16(s, 6).",
    "addroundkey": "AddRoundKey returns s ^ rk.",
    "cipher": "Round key r is rotl16(key, 3r) ^ r; Cipher whitens with the key then runs four rounds, the last without MixState. Three test vectors are given.",
}


# ---------------------------------------------------------------- transcripts

class Transcript:
    def __init__(self):
        self.lines = []

    def add(self, agent, patterns, response, max_uses=None):
        rec = {"agent": agent, "match": patterns, "response": response}
        if max_uses is not None:
            rec["max_uses"] = max_uses
        self.lines.append(json.dumps(rec, sort_keys=True))

    def write(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.lines) + "\n")

    # -- helpers keyed on the request headers
    def draft(self, name, level, attempt, rnd, body, mode=None):
        pats = [f"@task draft\n@subfunction {name}\n@level {level}\n@attempt {attempt}\n"]
        pats.append(f"@mode {mode}\n@round {rnd}\n" if mode else f"@round {rnd}\n")
        self.add("Coder", pats, "Implementation follows.\n" + fenced(name, body))

    def review(self, name, level, attempt, rnd, text):
        self.add("Verifier", [f"@task verify-code\n@subfunction {name}\n@level {level}\n@attempt {attempt}\n@round {rnd}\n"], text)

    def spec_tests(self, name, cases=None):
        self.add("Verifier", [f"@task derive-tests\n@subfunction {name}\n@level SCRIPT\n@origin SPEC\n"],
                 cases_reply(SPEC_CASES[name] if cases is None else cases))

    def hl_tests(self, name):
        self.add("Verifier", [f"@task derive-tests\n@subfunction {name}\n@level SYNTH\n@origin HIGHER_LEVEL\n"],
                 inputs_reply(HL_INPUTS[name]))

    def analyze(self, name, text):
        self.add("Analyzer", [f"@task analyze\n@subfunction {name}\n"], text)

    def route(self, name, text):
        self.add("Reflector", [f"@task decide-route\n@subfunction {name}\n"], text)


def understanding(t, specs=None):
    specs = specs or SPECS
    for sid, _, _, _ in SECTIONS:
        t.add("Summarizer", [f"@task summarize\n@section {sid}\n"], SUMMARIES[sid])
    plan = {
        "target": "Cipher",
        "sub_functions": [
            {"name": n, "goal": SPECS[n]["functionality"], "depends_on": DEPS.get(n, [])} for n in PLAN
        ],
    }
    t.add("Decomposer", ["@task decompose\n@target Cipher\n"], "```json\n" + json.dumps(plan, indent=1) + "\n```\n")
    for n in PLAN:
        t.add("Describer", [f"@task describe\n@subfunction {n}\n@round 1\n"], "```json\n" + json.dumps(specs[n], indent=1) + "\n```\n")
        t.add("Verifier", [f"@task verify-infodict\n@subfunction {n}\n"], "VERDICT: ACCEPT\n")


def pseudo(t, name):
    t.draft(name, "PSEUDO", 1, 1, PSEUDO[name])
    t.review(name, "PSEUDO", 1, 1, "VERDICT: ACCEPT\nSUSPICION: CURRENT\n")


def happy(t, name, levels=("PSEUDO", "SCRIPT", "SYNTH"), synth=None):
    if "PSEUDO" in levels:
        pseudo(t, name)
    if "SCRIPT" in levels:
        t.spec_tests(name)
        t.draft(name, "SCRIPT", 1, 1, SCRIPT[name])
    if "SYNTH" in levels:
        t.hl_tests(name)
        t.draft(name, "SYNTH", 1, 1, synth or SYNTH[name])


def toy():
    t = Transcript()
    understanding(t)
    for n in PLAN:
        happy(t, n)
    return t


def full_route_demo():
    t = Transcript()
    specs = dict(SPECS)
    specs["MixState"] = WRONG_MIX_SPEC
    understanding(t, specs)

    # REVISE_PRIOR: the SYNTH S-box is wrong for nibble F, which SubNibbles' own cases never touch.
    bad_sbox = list(ref.SBOX)
    bad_sbox[0xF] = 0x3
    assert all(ref.sub_nibbles(i[0], bad_sbox) == ref.sub_nibbles(i[0]) for i, _ in SPEC_CASES["SubNibbles"])
    assert all(ref.sub_nibbles(i[0], bad_sbox) == ref.sub_nibbles(i[0]) for i in HL_INPUTS["SubNibbles"])
    assert any(ref.cipher(p, k, bad_sbox) != ref.cipher(p, k) for (p, k), _ in SPEC_CASES["Cipher"])
    happy(t, "SubNibbles", synth=cpp_sub(bad_sbox))

    # REGENERATE_CURRENT on ShiftState SCRIPT.
    pseudo(t, "ShiftState")
    t.spec_tests("ShiftState")
    t.draft("ShiftState", "SCRIPT", 1, 1, "def ShiftState(s):\n    return ((s << 4) | (s >> 12)) & 0xFFFF\n")
    t.review("ShiftState", "SCRIPT", 1, 1, "VERDICT: REVISE\nSUSPICION: CURRENT\n- rotation amount does not match the examples\n")
    t.draft("ShiftState", "SCRIPT", 2, 1, "def ShiftState(s):\n    return ((s >> 5) | (s << 11)) & 0xFFFF\n")
    t.review("ShiftState", "SCRIPT", 2, 1, "VERDICT: REVISE\nSUSPICION: CURRENT\n- rotates the wrong way\n")
    t.analyze("ShiftState", "COMPLETED: SubNibbles done at all levels; ShiftState PSEUDO accepted.\n"
                            "FOCUS: ShiftState SCRIPT rotates by the wrong amount or direction.\n"
                            "HYPOTHESIS: CURRENT | the dictionary is right, the code keeps mis-rotating\n")
    t.route("ShiftState", "ROUTE: REGENERATE_CURRENT\nStart over: rotate the 16-bit word LEFT by exactly 5 positions and mask to 16 bits.\n")
    t.draft("ShiftState", "SCRIPT", 1, 2, SCRIPT["ShiftState"])
    t.hl_tests("ShiftState")
    t.draft("ShiftState", "SYNTH", 1, 1, SYNTH["ShiftState"])

    # REVISE_INSTRUCTIONS on MixState: the dictionary says rotl 4.
    pseudo(t, "MixState")
    t.spec_tests("MixState")
    wrong_mix = "def MixState(s):\n    return (s ^ ((s << 4) | (s >> 12))) & 0xFFFF\n"
    t.draft("MixState", "SCRIPT", 1, 1, wrong_mix)
    t.review("MixState", "SCRIPT", 1, 1, "VERDICT: REVISE\nSUSPICION: INSTRUCTIONS\n- code matches the dictionary but not the worked examples\n")
    t.draft("MixState", "SCRIPT", 2, 1, wrong_mix)
    t.review("MixState", "SCRIPT", 2, 1, "VERDICT: REVISE\nSUSPICION: INSTRUCTIONS\n- the dictionary's rotation amount contradicts the examples\n")
    t.analyze("MixState", "COMPLETED: SubNibbles and ShiftState done.\n"
                          "FOCUS: MixState(0x0001) should be 0x0041, code yields 0x0011.\n"
                          "HYPOTHESIS: INSTRUCTIONS | the dictionary rotates by 4; the examples need 6\n")
    t.route("MixState", "ROUTE: REVISE_INSTRUCTIONS MixState\nThe dictionary's rotation amount is wrong.\n")
    t.add("Describer", ["@task revise-instructions\n@subfunction MixState\n@round 1\n"],
          "```json\n" + json.dumps(SPECS["MixState"], indent=1) + "\n```\n")
    t.add("Verifier", ["@task verify-infodict\n@subfunction MixState\n"], "VERDICT: ACCEPT\n")
    t.spec_tests("MixState")
    t.draft("MixState", "SCRIPT", 1, 2, SCRIPT["MixState"])
    t.hl_tests("MixState")
    t.draft("MixState", "SYNTH", 1, 1, MIX_WITH_INT)

    # ESCALATE_HUMAN on AddRoundKey.
    pseudo(t, "AddRoundKey")
    t.spec_tests("AddRoundKey")
    t.draft("AddRoundKey", "SCRIPT", 1, 1, "def AddRoundKey(s, rk):\n    return (s | rk) & 0xFFFF\n")
    t.review("AddRoundKey", "SCRIPT", 1, 1, "VERDICT: REVISE\nSUSPICION: UNKNOWN\n- the combination operator is unclear\n")
    t.draft("AddRoundKey", "SCRIPT", 2, 1, "def AddRoundKey(s, rk):\n    return (s + rk) & 0xFFFF\n")
    t.review("AddRoundKey", "SCRIPT", 2, 1, "VERDICT: REVISE\nSUSPICION: UNKNOWN\n- still mismatching\n")
    t.analyze("AddRoundKey", "COMPLETED: three sub-functions done.\n"
                             "FOCUS: AddRoundKey(0x1234, 0x00FF) should be 0x12CB.\n"
                             "HYPOTHESIS: UNKNOWN | neither OR nor ADD matches\n")
    t.route("AddRoundKey", "ROUTE: ESCALATE_HUMAN\nThe combining operator cannot be determined from the attempts.\n")
    t.add("Reflector", ["@task intervention\n@subfunction AddRoundKey\n"],
          "OBSERVATIONS: OR and ADD both fail the worked example.\n"
          "ATTEMPTS: two SCRIPT drafts (s | rk, s + rk).\n"
          "QUESTION: Which operator combines the state and the round key?\n")
    t.draft("AddRoundKey", "SCRIPT", 1, 2, SCRIPT["AddRoundKey"])
    t.hl_tests("AddRoundKey")
    t.draft("AddRoundKey", "SYNTH", 1, 1, SYNTH["AddRoundKey"])

    # Cipher SYNTH fails because of SubNibbles SYNTH -> REVISE_PRIOR SubNibbles.
    pseudo(t, "Cipher")
    t.spec_tests("Cipher")
    t.draft("Cipher", "SCRIPT", 1, 1, SCRIPT["Cipher"])
    t.hl_tests("Cipher")
    t.draft("Cipher", "SYNTH", 1, 1, SYNTH["Cipher"])
    t.review("Cipher", "SYNTH", 1, 1, "VERDICT: REVISE\nSUSPICION: PRIOR_SUBFUNCTION\n- Cipher mirrors the SCRIPT reference; a called unit misbehaves\n")
    t.draft("Cipher", "SYNTH", 2, 1, SYNTH["Cipher"])
    t.review("Cipher", "SYNTH", 2, 1, "VERDICT: REVISE\nSUSPICION: PRIOR_SUBFUNCTION\n- same failures with unchanged logic\n")
    t.analyze("Cipher", "COMPLETED: all sub-functions accepted at SYNTH.\n"
                        "FOCUS: Cipher SYNTH disagrees with the SCRIPT oracle on vectors whose state contains nibble F.\n"
                        "HYPOTHESIS: PRIOR_SUBFUNCTION SubNibbles | S(F) looks wrong in the SYNTH S-box\n"
                        "HYPOTHESIS: CURRENT | key schedule slip\n")
    t.route("Cipher", "ROUTE: REVISE_PRIOR SubNibbles\nCheck the SYNTH S-box entry for nibble F against Table 1.\n")
    t.draft("SubNibbles", "SYNTH", 1, 1, SYNTH["SubNibbles"], mode="revise")
    t.draft("Cipher", "SYNTH", 1, 2, SYNTH["Cipher"])

    # HLS: MixState uses `unsigned int`; the first rewrite breaks behavior.
    t.add("CodeOptimizer", ["@task hls-optimize\n@subfunction MixState\n@round 1\n"], fenced("MixState", MIX_BROKEN))
    t.add("CodeOptimizer", ["@task hls-optimize\n@subfunction MixState\n@round 2\n"], fenced("MixState", SYNTH["MixState"]))
    return t


NOISY_SBOX = list(ref.SBOX)
NOISY_SBOX[0x3] = 0x7


def noise():
    t = Transcript()
    understanding(t)
    assert any(ref.sub_nibbles(i[0], NOISY_SBOX) != ref.sub_nibbles(i[0]) for i in HL_INPUTS["SubNibbles"])
    pseudo(t, "SubNibbles")
    t.spec_tests("SubNibbles")
    t.draft("SubNibbles", "SCRIPT", 1, 1, SCRIPT["SubNibbles"])
    t.add("NoiseInjector", ["@task inject-noise\n@subfunction SubNibbles\n@stage SCRIPT\n"],
          fenced("SubNibbles", py_sub(NOISY_SBOX)))
    t.hl_tests("SubNibbles")
    for attempt in (1, 2):
        t.draft("SubNibbles", "SYNTH", attempt, 1, SYNTH["SubNibbles"])
        t.review("SubNibbles", "SYNTH", attempt, 1,
                 "VERDICT: REVISE\nSUSPICION: PRIOR_SUBFUNCTION\n- HIGHER_LEVEL expectations contradict the document's S-box\n")
    t.analyze("SubNibbles", "COMPLETED: SubNibbles PSEUDO and SCRIPT accepted.\n"
                            "FOCUS: SYNTH matches Table 1 but not the SCRIPT oracle for nibble 3.\n"
                            "HYPOTHESIS: PRIOR_SUBFUNCTION SubNibbles | the accepted SCRIPT S-box maps 3 to 7, Table 1 says B\n")
    t.route("SubNibbles", "ROUTE: REVISE_PRIOR SubNibbles\nRe-check the SCRIPT S-box against Table 1.\n")
    t.draft("SubNibbles", "SCRIPT", 1, 1, SCRIPT["SubNibbles"], mode="revise")
    t.draft("SubNibbles", "SYNTH", 1, 2, SYNTH["SubNibbles"])
    for n in PLAN[1:]:
        happy(t, n)
    return t


def single_shot():
    t = Transcript()
    program = "#include <cstdint>\n\n" + "\n".join(SYNTH[n] for n in PLAN)
    t.add("Coder", ["@task single-shot\n@target Cipher\n"], "```cpp\n" + program + "```\n")
    return t


CONFIG = """target = "Cipher"
bundle = "bundle"
{mode}
[provider]
kind = "scripted"
transcript = "{transcript}"

[budgets]
max_attempts_per_level = {attempts}
optimizer_trigger = 3
max_reflections_per_subfunction = 3
hls_budget = 3
{extra}"""

SYNTH_CMD = '\n[hls]\nsynthesizer_cmd = "g++ -std=c++17 -fsyntax-only {file}"\n'


def write_config(name, attempts=2, extra="", mode=""):
    with open(os.path.join(OUT, f"{name}.toml"), "w") as f:
        f.write(CONFIG.format(transcript=f"{name}.transcript.jsonl", attempts=attempts, extra=extra, mode=mode))


# ---------------------------------------------------------------- HLS lint fixtures

HLS_FIXTURES = {
    "dynamic_alloc.cpp": (
        "#include <cstdint>\n\n"
        "uint16_t Scale(uint16_t x) {\n"
        "    uint16_t* buf = new uint16_t[4];\n"
        "    buf[0] = x;\n"
        "    uint16_t y = buf[0];\n"
        "    delete[] buf;\n"
        "    return y;\n"
        "}\n",
        [{"rule_id": "HLS001", "line": 4}, {"rule_id": "HLS001", "line": 7}],
    ),
    "recursion.cpp": (
        "#include <cstdint>\n\n"
        "uint16_t Fold(uint16_t x, uint8_t n) {\n"
        "    if (n == 0) {\n"
        "        return x;\n"
        "    }\n"
        "    return Fold((uint16_t)(x ^ (x >> 1)), (uint8_t)(n - 1));\n"
        "}\n",
        [{"rule_id": "HLS002", "line": 7}],
    ),
}


def write_hls():
    d = os.path.join(HERE, "hls")
    os.makedirs(d, exist_ok=True)
    expected = {}
    for fname, (text, viol) in HLS_FIXTURES.items():
        with open(os.path.join(d, fname), "w") as f:
            f.write(text)
        expected[fname] = viol
    with open(os.path.join(d, "expected.json"), "w") as f:
        json.dump(expected, f, indent=2)
        f.write("\n")


def main():
    os.makedirs(OUT, exist_ok=True)
    write_bundle()
    toy().write(os.path.join(OUT, "toy.transcript.jsonl"))
    write_config("toy", extra=SYNTH_CMD)
    full_route_demo().write(os.path.join(OUT, "full_route_demo.transcript.jsonl"))
    write_config("full_route_demo")
    noise().write(os.path.join(OUT, "noise.transcript.jsonl"))
    write_config("noise", extra='\n[noise]\nstage = "SCRIPT"\nsubfunction = "SubNibbles"\n')
    single_shot().write(os.path.join(OUT, "single_shot.transcript.jsonl"))
    write_config("single_shot", mode='mode = "single_shot"\n')
    write_hls()


if __name__ == "__main__":
    main()
