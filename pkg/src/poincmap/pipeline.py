"""End-to-end pipeline: integrate -> section -> embed -> map -> knead ->
cycles -> manifolds, with per-stage persistence and resume.

Every stage writes its artifacts under the run's output directory together
with a hash of the configuration slice it depends on (chained through the
upstream stages); re-running skips stages whose artifacts and hashes are
intact, so deleting a downstream artifact reproduces it from the persisted
upstream state.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import dynsys, lle, orbits, retmap, section, symdyn

__all__ = ["PipelineConfig", "RunManifest", "ConfigError", "run_pipeline",
           "load_config", "bundled_config_path", "perturb_check", "export_stage"]


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "integration": {"t_transient": 100.0, "tol": {"abs": 1e-9, "rel": 1e-6},
                    "chunk": 50.0, "method": None},
    "lle": {"delta": 1e-3, "d_r": 1},
    "symbolic": {"max_length": 6, "kneading_prefix": 40},
    "orbits": {"tol": 1e-6, "max_iter": 40, "extra_labels": [],
               "n_traj": 50, "t_max_periods": 3.0, "eps_seed": 1e-6,
               "manifold_labels": []},
    "map": {"window": 0.05, "threshold": 0.05, "window_frac": 0.02,
            "prominence": 0.02},
}


@dataclass
class PipelineConfig:
    raw: dict
    path: Optional[str] = None

    @property
    def system_name(self) -> str:
        return self.raw["system"]["name"]

    def section_def(self, block: Optional[dict] = None) -> section.SectionDef:
        s = block if block is not None else self.raw["section"]
        kind = s["kind"]
        if kind == "coordinate_plane":
            return section.SectionDef(kind=kind, index=int(s["index"]),
                                      level=float(s.get("level", 0.0)),
                                      orientation=int(s.get("orientation", 1)))
        return section.SectionDef(kind=kind, theta0=float(s["theta0"]),
                                  orientation=int(s.get("orientation", 1)))

    def get(self, stage: str, key: str, default=None):
        block = self.raw.get(stage, {}) or {}
        if key in block:
            return block[key]
        if default is not None:
            return default
        return _DEFAULTS.get(stage, {}).get(key)

    def validate(self) -> None:
        sysblock = self.raw.get("system")
        if not sysblock or sysblock.get("name") not in ("rossler", "kse"):
            raise ConfigError("system.name must be 'rossler' or 'kse'")
        if "section" not in self.raw:
            raise ConfigError("missing section block")
        if "integration" not in self.raw or "t_total" not in self.raw["integration"]:
            raise ConfigError("integration.t_total is required")
        lle_block = self.raw.get("lle") or {}
        if "K" not in lle_block:
            raise ConfigError("lle.K is required")
        d_r = int(lle_block.get("d_r", 1))
        if d_r == 2 and "tree" not in self.raw:
            raise ConfigError("d_r = 2 requires a tree block")
        if d_r == 1 and "tree" in self.raw:
            raise ConfigError("tree block given but d_r = 1")
        if "output_dir" not in self.raw:
            raise ConfigError("output_dir is required")


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} is not a mapping")
    cfg = PipelineConfig(raw=raw, path=str(path))
    cfg.validate()
    return cfg


def bundled_config_path(name: str) -> Path:
    p = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not p.exists():
        raise ConfigError(f"no bundled config '{name}'")
    return p


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str)
                          .encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    config: dict
    output_dir: str
    stages: dict = field(default_factory=dict)      # name -> {paths, hash, wall}
    derived: dict = field(default_factory=dict)

    def save(self) -> Path:
        path = Path(self.output_dir) / "manifest.json"
        with open(path, "w") as fh:
            json.dump({"config": self.config, "stages": self.stages,
                       "derived": self.derived}, fh, indent=1, default=str)
        return path

    @classmethod
    def load(cls, output_dir) -> "RunManifest":
        path = Path(output_dir) / "manifest.json"
        with open(path) as fh:
            data = json.load(fh)
        return cls(config=data["config"], output_dir=str(output_dir),
                   stages=data["stages"], derived=data["derived"])


def _stage_fresh(man: RunManifest, name: str, h: str) -> bool:
    st = man.stages.get(name)
    if not st or st.get("hash") != h:
        return False
    return all(Path(p).exists() for p in st.get("paths", {}).values())


# --- stage: sections --------------------------------------------------------

def _default_initial_state(system: dynsys.System) -> np.ndarray:
    if system.name == "rossler":
        return np.array([1.0, 1.0, 1.0])
    d = system.dim
    x = np.linspace(0, 2 * np.pi, 2 * d + 2, endpoint=False)
    u0 = 0.01 * np.sin(x)
    return np.imag(np.fft.rfft(u0))[1:d + 1]


def stage_sections(cfg: PipelineConfig, man: RunManifest):
    out = Path(man.output_dir)
    h = _hash([cfg.raw["system"], cfg.raw["integration"], cfg.raw["section"],
               cfg.raw.get("conjugacy")])
    paths = {"sections": str(out / "sections.csv")}
    has_conj = "conjugacy" in cfg.raw
    if has_conj:
        paths["sections_conj"] = str(out / "sections_conj.csv")
    sdef = cfg.section_def()
    if _stage_fresh(man, "sections", h):
        ds = section.dataset_from_csv(paths["sections"], sdef)
        ds_conj = (section.dataset_from_csv(paths["sections_conj"],
                                            cfg.section_def(cfg.raw["conjugacy"]["section"]))
                   if has_conj else None)
        return ds, ds_conj

    t0 = time.perf_counter()
    system = dynsys.make_system(cfg.system_name, cfg.raw["system"]["params"])
    tol = cfg.get("integration", "tol")
    method = cfg.get("integration", "method")
    t_total = float(cfg.raw["integration"]["t_total"])
    t_transient = float(cfg.get("integration", "t_transient"))
    chunk = float(cfg.get("integration", "chunk"))
    ic = np.asarray(cfg.raw["integration"].get("initial_state",
                                               _default_initial_state(system)),
                    dtype=float)

    seg = dynsys.integrate(system.field, system.jacobian, ic,
                           (0.0, t_transient), tol=tol, method=method,
                           stiff=system.stiff)
    x = seg.states[-1]

    sdef_conj = cfg.section_def(cfg.raw["conjugacy"]["section"]) if has_conj else None
    ds = section.SectionDataset(points=[], section=sdef)
    ds_conj = section.SectionDataset(points=[], section=sdef_conj) if has_conj else None
    t = t_transient
    t_end = t_transient + t_total
    while t < t_end - 1e-9:
        t1 = min(t + chunk, t_end)
        seg = dynsys.integrate(system.field, system.jacobian, x, (t, t1),
                               tol=tol, method=method, stiff=system.stiff)
        ds.extend(section.detect_crossings(seg, sdef))
        if has_conj:
            ds_conj.extend(section.detect_crossings(seg, sdef_conj))
        x = seg.states[-1]
        t = t1
    if cfg.system_name == "kse":
        ds = section.reduce_dataset(ds)
        if has_conj:
            ds_conj = section.reduce_dataset(ds_conj)
    section.dataset_to_csv(ds, paths["sections"])
    if has_conj:
        section.dataset_to_csv(ds_conj, paths["sections_conj"])
    dt = np.diff(ds.times)
    man.derived["n_crossings"] = len(ds)
    man.derived["mean_return_time"] = float(dt.mean()) if dt.size else None
    man.stages["sections"] = {"hash": h, "paths": paths,
                              "wall": time.perf_counter() - t0}
    man.save()
    return ds, ds_conj


# --- stage: embedding -------------------------------------------------------

def stage_embedding(cfg: PipelineConfig, man: RunManifest,
                    ds: section.SectionDataset) -> lle.EmbeddingModel:
    out = Path(man.output_dir)
    h = _hash([man.stages["sections"]["hash"], cfg.raw["lle"],
               cfg.raw.get("seed", 0)])
    paths = {"model": str(out / "embedding.npz"),
             "coords": str(out / "embedding.csv")}
    if _stage_fresh(man, "embedding", h):
        return lle.load_model(paths["model"])
    t0 = time.perf_counter()
    config = lle.LleConfig(K=int(cfg.raw["lle"]["K"]),
                           delta=float(cfg.get("lle", "delta")),
                           d_r=int(cfg.get("lle", "d_r")),
                           seed=int(cfg.raw.get("seed", 0)))
    model = lle.embed(ds.states, config)
    lle.save_model(model, paths["model"])
    lle.export_embedding_csv(model, ds.times, paths["coords"])
    man.stages["embedding"] = {"hash": h, "paths": paths,
                               "wall": time.perf_counter() - t0}
    man.save()
    return model


# --- stage: return map ------------------------------------------------------

def _radial_map(ds: section.SectionDataset) -> retmap.ReturnMap1D:
    """Raw radial return map (normalized to [0, 1]) from section crossings."""
    r = np.hypot(ds.states[:, 0], ds.states[:, 1])
    lo, hi = r.min(), r.max()
    rn = (r - lo) / (hi - lo)
    return retmap.build_return_map(rn)


def stage_map(cfg: PipelineConfig, man: RunManifest, model: lle.EmbeddingModel,
              ds: section.SectionDataset, ds_conj):
    out = Path(man.output_dir)
    d_r = model.config.d_r
    map_cfg = {k: cfg.get("map", k) for k in _DEFAULTS["map"]}
    h = _hash([man.stages["embedding"]["hash"], cfg.raw.get("tree"),
               map_cfg, "conj" if ds_conj is not None else ""])
    t0 = time.perf_counter()
    result: dict = {}
    paths = {"map": str(out / "return_map.csv")}

    if d_r == 1:
        rmap = retmap.build_return_map(model.coords[:, 0])
        passed, thickness, centers = retmap.singlevaluedness_test(
            rmap, window=map_cfg["window"], threshold=map_cfg["threshold"])
        retmap.find_critical_points(rmap, window_frac=map_cfg["window_frac"],
                                    prominence=map_cfg["prominence"],
                                    expected=cfg.get("map", "expected_modality", 1))
        result.update(rmap=rmap, decomposition=None, edge_maps=None)
        man.derived["map_single_valued"] = bool(passed)
        man.derived["map_max_thickness"] = float(thickness.max())
    else:
        tree = cfg.raw["tree"]
        coords = model.coords
        naive = retmap.build_return_map(coords[:, 0])
        naive_ok, naive_th, _ = retmap.singlevaluedness_test(
            naive, window=map_cfg["window"], threshold=map_cfg["threshold"])
        man.derived["naive_q1_map_single_valued"] = bool(naive_ok)
        man.derived["naive_q1_map_max_thickness"] = float(naive_th.max())
        alpha, beta = retmap.fit_tree_separator(coords, tree["fit_region"])
        cand = tree["cutoff_candidates"]
        candidates = np.linspace(float(cand["lo"]), float(cand["hi"]),
                                 int(cand.get("n", 41)))
        q1c = float(candidates[len(candidates) // 2])
        decomp = edge_maps = None
        jump = np.nan
        jump_ok = False
        for _ in range(3):
            decomp = retmap.assign_edges(coords, alpha, beta, q1c)
            edge_maps = retmap.build_edge_maps(decomp, coords)
            q1c_new, jump, jump_ok = retmap.choose_vertex_cutoff(
                edge_maps.g, edge_maps.h, edge_maps.w, candidates)
            if abs(q1c_new - q1c) < 1e-12:
                break
            q1c = q1c_new
        decomp = retmap.assign_edges(coords, alpha, beta, q1c)
        edge_maps = retmap.build_edge_maps(decomp, coords)
        rmap = retmap.compose_tree_map(decomp, coords, edge_maps)
        passed, thickness, _ = retmap.singlevaluedness_test(
            rmap, window=map_cfg["window"], threshold=map_cfg["threshold"])
        retmap.find_critical_points(rmap, window_frac=map_cfg["window_frac"],
                                    prominence=map_cfg["prominence"],
                                    expected=cfg.get("map", "expected_modality", 3))
        result.update(rmap=rmap, decomposition=decomp, edge_maps=edge_maps)
        man.derived.update(tree_alpha=alpha, tree_beta=beta, tree_q1c=q1c,
                           tree_junction_jump=float(jump),
                           tree_junction_ok=bool(jump_ok),
                           tree_bad_fraction=edge_maps.bad_fraction,
                           map_single_valued=bool(passed),
                           map_max_thickness=float(thickness.max()))
        paths["tree"] = str(out / "tree_decomposition.csv")
        retmap.decomposition_to_csv(decomp, coords, paths["tree"])
        for name, m in (("map_g", edge_maps.g), ("map_h", edge_maps.h),
                        ("map_w", edge_maps.w)):
            paths[name] = str(out / f"{name}.csv")
            retmap.map_to_csv(m, paths[name])

    retmap.map_to_csv(result["rmap"], paths["map"])
    man.derived["critical_points"] = [float(c) for c in result["rmap"].critical_points]
    man.derived["critical_types"] = list(result["rmap"].critical_types)

    if ds_conj is not None:
        conj_kind = cfg.raw["conjugacy"].get("coordinate", "radial")
        if conj_kind != "radial":
            raise ConfigError("only radial conjugacy maps are supported")
        rmap_conj = _radial_map(ds_conj)
        retmap.find_critical_points(rmap_conj, window_frac=map_cfg["window_frac"],
                                    prominence=map_cfg["prominence"], expected=1)
        paths["map_conj"] = str(out / "return_map_conj.csv")
        retmap.map_to_csv(rmap_conj, paths["map_conj"])
        result["rmap_conj"] = rmap_conj
    else:
        result["rmap_conj"] = None

    man.stages["map"] = {"hash": h, "paths": paths,
                         "wall": time.perf_counter() - t0}
    man.save()
    return result


# --- stage: kneading --------------------------------------------------------

def stage_knead(cfg: PipelineConfig, man: RunManifest, maps: dict):
    out = Path(man.output_dir)
    h = _hash([man.stages["map"]["hash"], cfg.raw.get("symbolic")])
    paths = {"kneading": str(out / "kneading.json")}
    t0 = time.perf_counter()
    rmap = maps["rmap"]
    L = int(cfg.get("symbolic", "kneading_prefix"))
    max_n = int(cfg.get("symbolic", "max_length"))
    kn = symdyn.kneading_data(rmap, L=L)
    labels = {n: ["".join(map(str, lab))
                  for lab in symdyn.admissible_labels(n, kn, rmap)]
              for n in range(1, max_n + 1)}
    report: dict = {
        "N": kn.N,
        "critical_points": [float(c) for c in kn.critical_points],
        "critical_types": kn.critical_types,
        "kneading_sequences": ["".join(map(str, s)) for s in kn.sequences],
        "theta_values": kn.theta_values,
        "admissible": labels,
    }
    if maps.get("rmap_conj") is not None:
        kn_conj = symdyn.kneading_data(maps["rmap_conj"], L=L)
        report["kneading_sequences_conj"] = ["".join(map(str, s))
                                             for s in kn_conj.sequences]
    if kn.N == 2:
        pre, per = symdyn.approximate_kneading(kn.sequences[0])
        rules = symdyn.finite_grammar_from_kneading(pre, per)
        report["entropy"] = symdyn.transition_graph_entropy(rules)
        report["admissible_point_counts"] = {
            n: symdyn.admissible_point_count(n, kn, rmap)
            for n in range(1, max_n + 1)}
    with open(paths["kneading"], "w") as fh:
        json.dump(report, fh, indent=1)
    man.derived["kneading_prefixes"] = [s[:10] for s in report["kneading_sequences"]]
    man.stages["knead"] = {"hash": h, "paths": paths,
                           "wall": time.perf_counter() - t0}
    man.save()
    return kn, report


# --- stage: cycles ----------------------------------------------------------

def _n_poinc_from_map(rmap: retmap.ReturnMap1D, decomp) -> list[int]:
    N = rmap.modality + 1
    if decomp is None:
        return [1] * N
    out = []
    for s in range(N):
        hi = 1.0 if s == N - 1 else float(rmap.critical_points[s])
        out.append(2 if hi <= decomp.q1c + 1e-9 else 1)
    return out


def stage_cycles(cfg: PipelineConfig, man: RunManifest, maps: dict,
                 kn: symdyn.KneadingData, model: lle.EmbeddingModel,
                 ds: section.SectionDataset):
    out = Path(man.output_dir)
    h = _hash([man.stages["knead"]["hash"], cfg.raw.get("orbits")])
    paths = {"cycles": str(out / "cycles.json"),
             "cycles_txt": str(out / "cycles.txt")}
    t0 = time.perf_counter()
    rmap = maps["rmap"]
    decomp = maps["decomposition"]
    system = dynsys.make_system(cfg.system_name, cfg.raw["system"]["params"])
    sdef = cfg.section_def()
    tol_orb = float(cfg.get("orbits", "tol"))
    max_iter = int(cfg.get("orbits", "max_iter"))
    tol_int = cfg.get("integration", "tol")
    t_return = man.derived.get("mean_return_time") or float(np.diff(ds.times).mean())
    n_poinc = _n_poinc_from_map(rmap, decomp)
    man.derived["n_poinc"] = n_poinc

    if decomp is None:
        inverse = lle.build_inverse(model, rule="nearest")
    else:
        subset = np.nonzero(decomp.labels != 3)[0]
        inverse = lle.build_inverse(model, subset=subset, rule="nearest")

    max_n = int(cfg.get("symbolic", "max_length"))
    labels = []
    for n in range(1, max_n + 1):
        labels.extend(symdyn.admissible_labels(n, kn, rmap))
    for extra in cfg.get("orbits", "extra_labels") or []:
        lab = tuple(int(c) for c in str(extra))
        if lab not in labels:
            labels.append(lab)

    branches = symdyn.BranchSystem.from_map(rmap)
    records = []
    for lab in labels:
        rec = _solve_label(lab, rmap, branches, inverse, system, sdef,
                           t_return, n_poinc, tol_int, tol_orb, max_iter)
        if rec.converged:
            try:
                rec.meta["multiplicity_checked"] = orbits.classify_multiplicity(
                    rec, system)
                rec.multiplicity = rec.meta["multiplicity_checked"]
            except RuntimeError as err:
                rec.meta["multiplicity_error"] = str(err)
            orbits.verify_label(rec, model, rmap, decomp)
        records.append(rec)
        orbits.cycle_table_json(records, paths["cycles"])
    with open(paths["cycles_txt"], "w") as fh:
        fh.write(orbits.cycle_table_text(records) + "\n")
    man.derived["cycles_converged"] = sum(r.converged for r in records)
    man.derived["cycles_total"] = len(records)
    man.stages["cycles"] = {"hash": h, "paths": paths,
                            "wall": time.perf_counter() - t0}
    man.save()
    return records


def _solve_label(lab, rmap, branches, inverse, system, sdef, t_return,
                 n_poinc, tol_int, tol_orb, max_iter) -> orbits.CycleRecord:
    try:
        guesses = symdyn.cycle_guesses(rmap, lab, branches)
        pts = orbits.map_cycle_refine(rmap, guesses, lab, tol=1e-6)
    except RuntimeError as err:
        return orbits.CycleRecord(
            label=lab, n=len(lab), map_points=np.empty(0),
            nodes=np.empty((0, system.dim)), durations=np.empty(0),
            T_p=np.nan, Lambda1=np.nan, multiplicity=0, converged=False,
            residual=np.inf, twisted=False, meta={"map_stage_error": str(err)})
    try:
        guess = orbits.flow_cycle_guess(pts, lab, inverse, system, sdef,
                                        t_return, n_poinc=n_poinc, tol=tol_int)
        return orbits.find_periodic_orbit(guess, system, sdef, tol=tol_orb,
                                          max_iter=max_iter)
    except RuntimeError as err:
        return orbits.CycleRecord(
            label=lab, n=len(lab), map_points=np.asarray(pts),
            nodes=np.empty((0, system.dim)), durations=np.empty(0),
            T_p=np.nan, Lambda1=np.nan, multiplicity=0, converged=False,
            residual=np.inf, twisted=False, meta={"flow_stage_error": str(err)})


# --- stage: manifolds -------------------------------------------------------

def stage_manifolds(cfg: PipelineConfig, man: RunManifest, records,
                    ds: section.SectionDataset):
    out = Path(man.output_dir)
    labels = cfg.get("orbits", "manifold_labels") or []
    if not labels:
        man.stages["manifolds"] = {"hash": "", "paths": {}, "wall": 0.0}
        man.save()
        return []
    h = _hash([man.stages["cycles"]["hash"], labels,
               cfg.get("orbits", "n_traj"), cfg.get("orbits", "t_max_periods")])
    t0 = time.perf_counter()
    system = dynsys.make_system(cfg.system_name, cfg.raw["system"]["params"])
    sdef = cfg.section_def()
    diam = float(np.linalg.norm(ds.states.max(axis=0) - ds.states.min(axis=0)))
    by_label = {"".join(map(str, r.label)): r for r in records if r.converged}
    bundles = []
    paths = {}
    for name in labels:
        rec = by_label.get(str(name))
        if rec is None:
            continue
        bundle = orbits.unstable_manifold(
            rec, system, sdef,
            n_traj=int(cfg.get("orbits", "n_traj")),
            t_max=float(cfg.get("orbits", "t_max_periods")) * rec.T_p,
            eps_seed=float(cfg.get("orbits", "eps_seed")),
            data_diameter=diam, tol=cfg.get("integration", "tol"))
        pcts = _containment(bundle, ds)
        bundle.meta["containment_p95_over_diameter"] = pcts
        man.derived.setdefault("manifolds", {})[str(name)] = pcts
        path = out / f"manifold_{name}.csv"
        paths[f"manifold_{name}"] = str(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["traj", "idx"] + [f"c{i+1}" for i in range(system.dim)])
            for ti, states in enumerate(bundle.crossings):
                for ii, s in enumerate(states):
                    w.writerow([ti, ii] + [repr(float(v)) for v in s])
        bundles.append(bundle)
    man.stages["manifolds"] = {"hash": h, "paths": paths,
                               "wall": time.perf_counter() - t0}
    man.save()
    return bundles


def _containment(bundle, ds: section.SectionDataset) -> float:
    from scipy.spatial import cKDTree
    pts = np.vstack([c for c in bundle.crossings if c.size])
    tree = cKDTree(ds.states)
    dist, _ = tree.query(pts)
    diam = float(np.linalg.norm(ds.states.max(axis=0) - ds.states.min(axis=0)))
    return float(np.percentile(dist, 95) / diam)


# --- driver -----------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig) -> RunManifest:
    out = Path(cfg.raw["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        man = RunManifest.load(out)
        man.config = cfg.raw
    except FileNotFoundError:
        man = RunManifest(config=cfg.raw, output_dir=str(out))
    ds, ds_conj = stage_sections(cfg, man)
    model = stage_embedding(cfg, man, ds)
    maps = stage_map(cfg, man, model, ds, ds_conj)
    kn, _ = stage_knead(cfg, man, maps)
    records = []
    if int(cfg.get("symbolic", "max_length")) > 0 and \
            cfg.raw.get("orbits", {}).get("enabled", True):
        records = stage_cycles(cfg, man, maps, kn, model, ds)
        stage_manifolds(cfg, man, records, ds)
    man.save()
    return man


# --- perturbation / robustness check ----------------------------------------

def perturb_check(cfg: PipelineConfig, variants=("tol10x", "len150",
                                                 "k_minus20", "k_plus20")):
    """Re-run the pipeline through the kneading stage under perturbed
    numerics and diff the kneading prefixes (length 10) against baseline."""
    base_man = run_pipeline(_knead_only(cfg, Path(cfg.raw["output_dir"])))
    base = base_man.derived["kneading_prefixes"]
    results = {"baseline": base, "variants": {}, "all_match": True}
    for name in variants:
        raw = json.loads(json.dumps(cfg.raw))
        if name == "tol10x":
            raw["integration"]["tol"] = {
                "abs": float(cfg.get("integration", "tol")["abs"]) * 10,
                "rel": float(cfg.get("integration", "tol")["rel"]) * 10}
        elif name == "len150":
            raw["integration"]["t_total"] = 1.5 * float(raw["integration"]["t_total"])
        elif name == "k_minus20":
            raw["lle"]["K"] = int(round(0.8 * raw["lle"]["K"]))
        elif name == "k_plus20":
            raw["lle"]["K"] = int(round(1.2 * raw["lle"]["K"]))
        else:
            raise ConfigError(f"unknown perturbation variant '{name}'")
        raw["output_dir"] = str(Path(cfg.raw["output_dir"]) / "variants" / name)
        vcfg = PipelineConfig(raw=raw)
        vcfg.validate()
        vman = run_pipeline(_knead_only(vcfg, Path(raw["output_dir"])))
        prefixes = vman.derived["kneading_prefixes"]
        match = prefixes == base
        results["variants"][name] = {"prefixes": prefixes, "match": match}
        results["all_match"] = results["all_match"] and match
    report = Path(cfg.raw["output_dir"]) / "perturb_check.json"
    with open(report, "w") as fh:
        json.dump(results, fh, indent=1)
    return results


def _knead_only(cfg: PipelineConfig, out: Path) -> PipelineConfig:
    raw = json.loads(json.dumps(cfg.raw))
    raw["output_dir"] = str(out)
    raw.setdefault("orbits", {})["enabled"] = False
    ncfg = PipelineConfig(raw=raw)
    ncfg.validate()
    return ncfg


# --- export ------------------------------------------------------------------

_STAGE_OF = {"sections": "sections", "embedding": "embedding",
             "return_map": "map", "tree": "map", "kneading": "knead",
             "cycles": "cycles", "manifolds": "manifolds"}


def export_stage(man: RunManifest, stage: str, fmt: str) -> list[str]:
    """Return artifact paths for a stage; formats already on disk are
    returned directly (csv for data stages, json for symbolic ones)."""
    if stage not in _STAGE_OF:
        raise ConfigError(f"unknown stage '{stage}' "
                          f"(choose from {sorted(_STAGE_OF)})")
    st = man.stages.get(_STAGE_OF[stage])
    if not st or not st.get("paths"):
        raise ConfigError(f"stage '{stage}' has no artifacts in this run")
    paths = [p for k, p in st["paths"].items()]
    want = {"csv": ".csv", "json": ".json", "npz": ".npz"}.get(fmt)
    if want is None:
        raise ConfigError(f"unknown format '{fmt}'")
    chosen = [p for p in paths if p.endswith(want)]
    if not chosen:
        raise ConfigError(f"stage '{stage}' has no {fmt} artifact "
                          f"(available: {paths})")
    return chosen
