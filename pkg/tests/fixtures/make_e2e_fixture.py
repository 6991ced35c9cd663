"""Regenerate the bundled end-to-end fixture (200-record corpus).

Deterministic by construction; run from the repository root:

    python tests/fixtures/make_e2e_fixture.py

Layout decisions the pipeline tests rely on:
- every one of the 25 ERC panels has exactly 2 CORDIS projects;
- each project has one OpenAlex publication whose title+abstract equals the
  project's title+objective, so percentile-100 label propagation keeps it;
- the raw inputs contain a known set of records that dedupe/filtering must
  remove, leaving exactly 200 corpus records.
"""

from __future__ import annotations

import json
import random
from pathlib import Path
from xml.sax.saxutils import escape

OUT = Path(__file__).parent / "e2e"

PANEL_CODES = [f"PE{i}" for i in range(1, 11)] + [f"LS{i}" for i in range(1, 10)] + [
    f"SH{i}" for i in range(1, 7)
]

CLIMATE = [
    "climate change adaptation in coastal regions",
    "wind energy turbines for renewable power grids",
    "sea level rise threatens low lying islands",
    "greenhouse gas emissions from livestock farming",
    "carbon capture and storage demonstration plants",
    "global warming impacts on arctic sea ice",
]

NEUTRAL = [
    "protein folding pathways in yeast cells",
    "medieval manuscripts and their shifting provenance",
    "quantum computing with superconducting qubits",
    "market dynamics under asymmetric information",
    "deep learning methods for image segmentation",
    "bridge engineering and novel structural materials",
]

ORGS = [
    ("University of Copenhagen", "DK"),
    ("Aarhus University", "DK"),
    ("Technical University of Denmark", "DK"),
    ("Aalborg University", "DK"),
    ("University of Southern Denmark", "DK"),
    ("Danish Meteorological Institute", "DK"),
]

MUNICIPALITIES = ["Vejle Kommune", "Kolding Municipality", "Aalborg Municipality", "Odense Kommune"]


def snippet(rng: random.Random, tagged: bool) -> str:
    pool = CLIMATE if tagged else NEUTRAL
    extra = NEUTRAL if rng.random() < 0.5 else pool
    return f"{rng.choice(pool)} {rng.choice(extra)}"


def invert(text: str) -> dict[str, list[int]]:
    inverted: dict[str, list[int]] = {}
    for pos, token in enumerate(text.split()):
        inverted.setdefault(token, []).append(pos)
    return inverted


def org_entry(i: int) -> dict:
    name, country = ORGS[i % len(ORGS)]
    return {"display_name": name, "country_code": country, "id": f"I{i % len(ORGS)}"}


def main() -> None:
    rng = random.Random(20140101)
    OUT.mkdir(parents=True, exist_ok=True)

    # --- CORDIS: 2 projects per panel, all 25 panels -------------------------
    cordis_rows = []
    projects = []  # (project_id, title, objective, panel, tagged)
    for p_idx, panel in enumerate(PANEL_CODES):
        for variant in ("a", "b"):
            i = len(projects)
            tagged = i % 2 == 0
            title = f"Project {panel} {variant} horizon uid{i}"
            objective = f"{snippet(rng, tagged)} objective study uid{i}"
            projects.append((f"erc-{panel.lower()}-{variant}", title, objective, panel, tagged))
    for project_id, title, objective, panel, _ in projects:
        orgs = f"{ORGS[0][0]};{ORGS[2][0]}"
        cordis_rows.append(
            f"{project_id},{title},{objective},{panel},2016,{orgs},DK;DK"
        )
    header = "project_id,title,objective,panel,start_year,participants,participant_countries"
    (OUT / "cordis.csv").write_text(header + "\n" + "\n".join(cordis_rows) + "\n", "utf-8")

    # --- OpenAlex: ERC-linked exact-copy pubs + regular pubs + known drops ----
    works = []
    for idx, (project_id, title, objective, panel, _) in enumerate(projects):
        works.append(
            {
                "id": f"https://openalex.org/W-erc-{idx}",
                "title": title,
                "publication_year": 2017,
                "language": "en",
                "abstract_inverted_index": invert(objective),
                "authorships": [{"institutions": [org_entry(idx)]}],
                "grants": [{"award_id": project_id}],
            }
        )
    for i in range(39):
        tagged = i % 3 != 2
        text = f"{snippet(rng, tagged)} finding uid-oa{i}"
        work = {
            "id": f"https://openalex.org/W-reg-{i}",
            "title": f"Observations on {text.split()[0]} systems uid-oa{i}",
            "publication_year": 2014 + i % 6,
            "language": "en",
            "authorships": [{"institutions": [org_entry(i)]}],
        }
        if i % 7 != 3:  # a few records carry no abstract at all
            work["abstract_inverted_index"] = invert(text)
        else:
            work["title"] = f"Measuring {'wind energy' if tagged else 'market'} output uid-oa{i}"
        works.append(work)
    # Duplicate DOI pair: dedupe keeps one record with the earlier year.
    for year, suffix in ((2018, "a"), (2015, "b")):
        works.append(
            {
                "id": f"https://openalex.org/W-dup-{suffix}",
                "title": "Shared climate change dataset paper",
                "doi": "10.9999/shared-dataset",
                "publication_year": year,
                "abstract_inverted_index": invert(
                    "climate change indicators compiled for national reporting"
                ),
                "authorships": [{"institutions": [org_entry(1)]}],
            }
        )
    # Non-Danish records: the country filter must drop them.
    for i in range(2):
        works.append(
            {
                "id": f"https://openalex.org/W-de-{i}",
                "title": f"Foreign affiliation paper uid-de{i}",
                "publication_year": 2016,
                "abstract_inverted_index": invert("wind energy analysis abroad"),
                "authorships": [
                    {"institutions": [{"display_name": "TU Berlin", "country_code": "DE"}]}
                ],
            }
        )
    (OUT / "openalex_works.json").write_text(
        json.dumps({"results": works}, indent=1, sort_keys=True), "utf-8"
    )

    # --- OpenAIRE XML ---------------------------------------------------------
    results = []
    for i in range(40):
        tagged = i % 2 == 0
        text = f"{snippet(rng, tagged)} evidence uid-oai{i}"
        org, country = ORGS[(i + 2) % len(ORGS)]
        dates = [f"{2014 + i % 6}-03-01"]
        if i % 5 == 0:  # conflicting repository dates; the earlier year wins
            dates.append(f"{2014 + i % 6 + 1}-09-01")
        date_tags = "".join(f"<dateofacceptance>{d}</dateofacceptance>" for d in dates)
        abstract = f"<description>{escape(text)}</description>" if i % 6 != 5 else ""
        results.append(
            "<result>"
            f"<objIdentifier>oai:fixture:{i}</objIdentifier>"
            f"<title>{escape(f'Registered output number {i} uid-oai{i}')}</title>"
            f"{abstract}{date_tags}"
            '<language classid="en"/>'
            f'<rels><rel><legalname>{escape(org)}</legalname><country classid="{country}"/></rel></rels>'
            "</result>"
        )
    # Out-of-range year: the filter must drop it.
    results.append(
        "<result>"
        "<objIdentifier>oai:fixture:old</objIdentifier>"
        "<title>Ancient output uid-old</title>"
        "<description>climate change discussion before the study period</description>"
        "<dateofacceptance>2013-01-01</dateofacceptance>"
        f'<rels><rel><legalname>{ORGS[0][0]}</legalname><country classid="DK"/></rel></rels>'
        "</result>"
    )
    xml = (
        '<?xml version="1.0" encoding="UTF-8"?><response><header><total>'
        f"{len(results)}</total></header><results>{''.join(results)}</results></response>"
    )
    (OUT / "openaire.xml").write_text(xml, "utf-8")

    # --- Kohesio ---------------------------------------------------------------
    kohesio_rows = []
    for i in range(21):
        beneficiary = MUNICIPALITIES[i % len(MUNICIPALITIES)]
        country = "SE" if i == 20 else "DK"  # the SE row must be filtered out
        tagged = i % 2 == 0
        if i % 4 == 3:
            label = f"Regional initiative {i} uid-ko{i}"
            description = label  # equals the title: low quality, nulled
        elif i % 4 == 1:
            label = (
                f"Municipal wind energy retrofit {i} uid-ko{i}"
                if tagged
                else f"Municipal road maintenance {i} uid-ko{i}"
            )
            description = "too short here"
        else:
            label = f"Cohesion project {i} uid-ko{i}"
            description = f"{snippet(rng, tagged)} delivered for citizens uid-ko{i}"
        kohesio_rows.append(f"{i + 1000},{label},{description},{beneficiary},{country},2016")
    header = "project_id,label,description,beneficiary,country,year"
    (OUT / "kohesio.csv").write_text(header + "\n" + "\n".join(kohesio_rows) + "\n", "utf-8")

    # --- vocabulary --------------------------------------------------------------
    vocabulary = {
        "goals": [
            {
                "goal": 13,
                "concepts": [
                    {
                        "label": "climate change & warming",
                        "terms": [
                            {"tokens": ["climate", "change"], "max_gap": 1},
                            {"tokens": ["global", "warming"]},
                            {"tokens": ["climate", "adaptation"], "max_gap": 2},
                        ],
                    },
                    {
                        "label": "emissions",
                        "terms": [
                            {"tokens": ["greenhouse", "gas", "emissions"], "max_gap": 1},
                            {"tokens": ["carbon", "capture"]},
                        ],
                    },
                    {
                        "label": "renewable energy",
                        "terms": [
                            {"tokens": ["wind", "energy"], "allow_permutation": True},
                            {"tokens": ["renewable", "power"], "max_gap": 1},
                        ],
                    },
                    {
                        "label": "sea level",
                        "terms": [{"tokens": ["sea", "level", "rise"], "max_gap": 0}],
                    },
                ],
            }
        ]
    }
    (OUT / "vocabulary.json").write_text(json.dumps(vocabulary, indent=1, sort_keys=True), "utf-8")

    # --- pipeline config -----------------------------------------------------------
    (OUT / "pipeline.toml").write_text(
        """[pipeline]
country = "DK"
year_start = 2014
year_end = 2019
out_dir = "out"
seed = 42

[harvest]
sources = ["openalex", "openaire", "cordis", "kohesio"]
openalex_files = ["openalex_works.json"]
openaire_files = ["openaire.xml"]
cordis_csv = "cordis.csv"
kohesio_csv = "kohesio.csv"

[vocab]
path = "vocabulary.json"
min_hits = 1

[embed]
provider = "fallback"
dim = 64

[topics]
k = 6
perplexity = 8.0
tsne_iterations = 300

[panels]
percentile = 100.0
epochs = 30
learning_rate = 0.5
l2 = 1e-4
batch_size = 16

[report]
top_n_affiliations = 10
""",
        "utf-8",
    )
    print(f"fixture written to {OUT}")


if __name__ == "__main__":
    main()
