//! Experiment runner: key=value configs, suites, CSV tables and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::alpert::{AlpertBasis, AtomFamily, SquareGeom, Variant};
use crate::dyadic::{nu_disjoint_triple, DyadicSquare, Placement, Rect};
use crate::error::{Error, Result};
use crate::extension::{
    fourier_square_function, kakeya_blocks, khintchine_trilinear, AtomicSettings, FrequencyGrid,
    RealField,
};
use crate::frame::{FrameContext, PairFilter, Window};
use crate::kakeya::{
    generate_family, generate_family_in_cap, nu_separated_caps, overlap_norm,
    trilinear_overlap_norm, FamilyKind, Tube, TubeFamily, DEFAULT_CELL_CAP,
};
use crate::modulation::{
    mod_factorization_check, scales_decay_scan, translation_commutation_check, Father,
    KakeyaPolynomial, ModulationSequence, OscSettings,
};
use crate::quad::{Rule1D, RuleBuilder, SampledField2D, TensorGrid};
use crate::stats::{fit_log2, LineFit};

/// Raw `key = value` pairs; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    pub entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", n + 1)));
            }
            if entries
                .insert(k.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Parse(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Resolved parameters of every suite.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub s_list: Vec<i32>,
    pub q: f64,
    /// Ball exponent: `R = 2^{s/(1−δ)}`.
    pub delta: f64,
    pub kappa: usize,
    pub eta: f64,
    pub nu: f64,
    pub n_trunc: u32,
    pub seed: u64,
    pub window: (i32, i32),
    pub freq_spacing: f64,
    pub radius_cap: f64,
    pub mc_samples: usize,
    pub trials: usize,
    pub basis_kappas: Vec<usize>,
    pub eta_sweep: Vec<f64>,
    pub scales_s: i32,
    pub scales_multiplier: f64,
    pub scales_levels: (i32, i32),
    pub kakeya_deltas: Vec<f64>,
    pub kakeya_families: Vec<String>,
    /// Tube width of the single-tube, additivity and symmetry checks.
    pub check_delta: f64,
    pub raster_fraction: f64,
    /// Largest `s` at which condition ℬ also evaluates the 𝒜-form on its inputs.
    pub compare_a_max_s: i32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            s_list: vec![1, 2, 3],
            q: 4.0,
            delta: 0.5,
            kappa: 3,
            eta: 0.02,
            nu: 0.125,
            n_trunc: 2,
            seed: 1,
            window: (0, 3),
            freq_spacing: 0.5,
            radius_cap: 32.0,
            mc_samples: 200,
            trials: 10,
            basis_kappas: vec![1, 2, 3, 4],
            eta_sweep: vec![0.01, 0.02, 0.05, 0.08],
            scales_s: 2,
            scales_multiplier: 1.0,
            scales_levels: (-3, 8),
            kakeya_deltas: vec![0.125, 0.0625, 0.03125],
            kakeya_families: vec!["bush".into(), "random".into()],
            check_delta: 0.0625,
            raster_fraction: 0.125,
            compare_a_max_s: 2,
        }
    }
}

impl ExperimentConfig {
    /// Defaults overridden by `raw`; unknown keys are an error.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in &raw.entries {
            match k.as_str() {
                "s_list" => c.s_list = parse_list(k, v)?,
                "q" => c.q = parse_value(k, v)?,
                "delta" => c.delta = parse_value(k, v)?,
                "kappa" => c.kappa = parse_value(k, v)?,
                "eta" => c.eta = parse_value(k, v)?,
                "nu" => c.nu = parse_value(k, v)?,
                "n_trunc" => c.n_trunc = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                "window" => {
                    let w: Vec<i32> = parse_list(k, v)?;
                    if w.len() != 2 {
                        return Err(Error::Config("`window`: expected lo,hi".into()));
                    }
                    c.window = (w[0], w[1]);
                }
                "freq_spacing" => c.freq_spacing = parse_value(k, v)?,
                "radius_cap" => c.radius_cap = parse_value(k, v)?,
                "mc_samples" => c.mc_samples = parse_value(k, v)?,
                "trials" => c.trials = parse_value(k, v)?,
                "basis_kappas" => c.basis_kappas = parse_list(k, v)?,
                "eta_sweep" => c.eta_sweep = parse_list(k, v)?,
                "scales_s" => c.scales_s = parse_value(k, v)?,
                "scales_multiplier" => c.scales_multiplier = parse_value(k, v)?,
                "scales_levels" => {
                    let w: Vec<i32> = parse_list(k, v)?;
                    if w.len() != 2 {
                        return Err(Error::Config("`scales_levels`: expected lo,hi".into()));
                    }
                    c.scales_levels = (w[0], w[1]);
                }
                "kakeya_deltas" => c.kakeya_deltas = parse_list(k, v)?,
                "kakeya_families" => c.kakeya_families = parse_list(k, v)?,
                "check_delta" => c.check_delta = parse_value(k, v)?,
                "raster_fraction" => c.raster_fraction = parse_value(k, v)?,
                "compare_a_max_s" => c.compare_a_max_s = parse_value(k, v)?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.q > 3.0) {
            return bad("q must exceed 3");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return bad("nu must lie in (0, 1)");
        }
        if !(self.eta > 0.0) || self.eta_sweep.iter().any(|e| !(*e > 0.0)) {
            return bad("eta values must be positive");
        }
        if self.kappa == 0 || self.basis_kappas.contains(&0) {
            return bad("kappa must be at least 1");
        }
        if self.s_list.iter().any(|s| !(1..=6).contains(s)) {
            return bad("s_list entries must lie in 1..=6");
        }
        if !(self.freq_spacing > 0.0 && self.freq_spacing <= 1.0) || !(self.radius_cap > 0.0) {
            return bad("freq_spacing must lie in (0, 1] and radius_cap be positive");
        }
        if self
            .kakeya_deltas
            .iter()
            .chain([&self.check_delta])
            .any(|d| !(*d > 0.0 && *d <= 0.5))
        {
            return bad("tube widths must lie in (0, 1/2]");
        }
        if !(self.raster_fraction > 0.0 && self.raster_fraction <= 1.0) {
            return bad("raster_fraction must lie in (0, 1]");
        }
        for f in &self.kakeya_families {
            f.parse::<FamilyKind>()?;
        }
        Ok(())
    }

    /// `2^{−s} ≤ ν`.
    pub fn scale_admissible(&self, s: i32) -> bool {
        (-s as f64).exp2() <= self.nu * (1.0 + 1e-12)
    }

    /// `min(2^{s/(1−δ)}, radius_cap)`.
    pub fn ball_radius(&self, s: i32) -> f64 {
        (s as f64 / (1.0 - self.delta)).exp2().min(self.radius_cap)
    }

    /// Every resolved value as sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let pairs: BTreeMap<&str, String> = [
            ("basis_kappas", fmt_list(&self.basis_kappas)),
            ("check_delta", self.check_delta.to_string()),
            ("compare_a_max_s", self.compare_a_max_s.to_string()),
            ("delta", self.delta.to_string()),
            ("eta", self.eta.to_string()),
            ("eta_sweep", fmt_list(&self.eta_sweep)),
            ("freq_spacing", self.freq_spacing.to_string()),
            ("kakeya_deltas", fmt_list(&self.kakeya_deltas)),
            ("kakeya_families", self.kakeya_families.join(",")),
            ("kappa", self.kappa.to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("n_trunc", self.n_trunc.to_string()),
            ("nu", self.nu.to_string()),
            ("q", self.q.to_string()),
            ("radius_cap", self.radius_cap.to_string()),
            ("raster_fraction", self.raster_fraction.to_string()),
            ("s_list", fmt_list(&self.s_list)),
            (
                "scales_levels",
                format!("{},{}", self.scales_levels.0, self.scales_levels.1),
            ),
            ("scales_multiplier", self.scales_multiplier.to_string()),
            ("scales_s", self.scales_s.to_string()),
            ("seed", self.seed.to_string()),
            ("trials", self.trials.to_string()),
            ("window", format!("{},{}", self.window.0, self.window.1)),
        ]
        .into_iter()
        .collect();
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`canonical`](Self::canonical), hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

/// CSV table with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    /// Table from CSV text produced by a scan.
    pub fn from_csv(text: &str) -> Self {
        let mut lines = text.lines();
        let header = lines
            .next()
            .unwrap_or("")
            .split(',')
            .map(String::from)
            .collect();
        let rows = lines
            .map(|l| l.split(',').map(String::from).collect())
            .collect();
        Self { header, rows }
    }
}

/// Format a float for tables: `{:.6e}`, or `nan`.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6e}")
    } else {
        "nan".into()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_else(|| "nan".into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Gate {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Tables, gates and notes of one suite run.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub config: ExperimentConfig,
    pub tables: Vec<(String, Table)>,
    pub gates: Vec<Gate>,
    pub notes: Vec<String>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn new(suite: &str, config: &ExperimentConfig) -> Self {
        Self {
            suite: suite.into(),
            config: config.clone(),
            tables: Vec::new(),
            gates: Vec::new(),
            notes: Vec::new(),
            seconds: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn gate(&self, name: &str) -> Option<&Gate> {
        self.gates.iter().find(|g| g.name == name)
    }

    pub fn report_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "suite: {}", self.suite);
        let _ = writeln!(s, "config_hash: {}", self.config.hash());
        let _ = writeln!(s, "status: {}", if self.passed() { "PASS" } else { "FAIL" });
        let _ = writeln!(s, "elapsed_s: {:.2}", self.seconds);
        let _ = writeln!(s, "\n[gates]");
        for g in &self.gates {
            let _ = writeln!(
                s,
                "{} {}: {}",
                if g.passed { "PASS" } else { "FAIL" },
                g.name,
                g.detail
            );
        }
        if !self.notes.is_empty() {
            let _ = writeln!(s, "\n[notes]");
            for n in &self.notes {
                let _ = writeln!(s, "{n}");
            }
        }
        let _ = writeln!(s, "\n[tables]");
        for (n, t) in &self.tables {
            let _ = writeln!(s, "{n}.csv ({} rows)", t.rows.len());
        }
        let _ = writeln!(s, "\n[config]");
        s.push_str(&self.config.canonical());
        s
    }

    /// Write `<name>.csv` per table and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (n, t) in &self.tables {
            std::fs::write(dir.join(format!("{n}.csv")), t.to_csv())?;
        }
        std::fs::write(dir.join("report.txt"), self.report_text())?;
        Ok(())
    }
}

fn finish(mut r: SuiteReport, t0: Instant) -> SuiteReport {
    r.seconds = t0.elapsed().as_secs_f64();
    log::info!(
        "{} finished in {:.1}s: {}",
        r.suite,
        r.seconds,
        if r.passed() { "PASS" } else { "FAIL" }
    );
    r
}

/// Moments `∫h^η_{a}x^β` of every smooth atom at unit scale for each κ.
pub fn run_basis(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let mut r = SuiteReport::new("basis", cfg);
    let unit = SquareGeom::new(0.0, 0.0, 1.0)?;
    let mut moments = Table::new(&[
        "kappa",
        "atom",
        "beta1",
        "beta2",
        "smooth_moment",
        "raw_moment",
    ]);
    let mut dims = Table::new(&["kappa", "dim", "expected_dim", "max_smooth_moment"]);
    let mut worst: f64 = 0.0;
    for &k in &cfg.basis_kappas {
        let fam = AtomFamily::new(k, cfg.eta)?;
        let mut kmax: f64 = 0.0;
        for a in 0..fam.dim() {
            for beta in crate::alpert::monomials(k) {
                let v = fam.moment(&unit, a, Variant::Smooth, beta);
                let raw = fam.moment(&unit, a, Variant::Raw, beta);
                kmax = kmax.max(v.abs());
                moments.push(vec![
                    k.to_string(),
                    a.to_string(),
                    beta[0].to_string(),
                    beta[1].to_string(),
                    num(v),
                    num(raw),
                ]);
            }
        }
        dims.push(vec![
            k.to_string(),
            fam.dim().to_string(),
            AlpertBasis::expected_dim(k).to_string(),
            num(kmax),
        ]);
        worst = worst.max(kmax);
    }
    r.gates.push(Gate::new(
        "moments_vanish",
        worst < 1e-8,
        format!("max |moment| = {worst:.3e} (< 1e-8)"),
    ));
    r.tables.push(("moments".into(), moments));
    r.tables.push(("dimensions".into(), dims));
    Ok(finish(r, t0))
}

/// Reproduction residuals of random expansions and the η sweep of `‖𝕀 − T‖`.
pub fn run_frame_verify(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let mut r = SuiteReport::new("frame-verify", cfg);
    let window = Window::new(cfg.window.0, cfg.window.1)?;
    let ctx = FrameContext::new(
        AtomFamily::new(cfg.kappa, cfg.eta)?,
        Placement::default(),
        window,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut res = Table::new(&["trial", "residual", "neumann_terms", "max_ratio"]);
    let mut worst: f64 = 0.0;
    for k in 0..cfg.trials {
        let f = ctx.random_expansion(&mut rng);
        let (e, rep) = ctx.reproduction_residual(&f, 1e-8)?;
        worst = worst.max(e);
        res.push(vec![
            k.to_string(),
            num(e),
            rep.terms.to_string(),
            num(rep.max_ratio),
        ]);
    }
    r.gates.push(Gate::new(
        "reproduction",
        cfg.trials > 0 && worst < 1e-4,
        format!(
            "max relative residual {worst:.3e} over {} trials (< 1e-4, Neumann tol 1e-8)",
            cfg.trials
        ),
    ));
    r.notes.push(format!(
        "atoms: {} squares x {} = {}",
        ctx.squares.len(),
        ctx.d(),
        ctx.len()
    ));
    let mut sweep = Table::new(&["eta", "contraction"]);
    let mut largest = None;
    for &eta in &cfg.eta_sweep {
        let c = match AtomFamily::new(cfg.kappa, eta) {
            Ok(fam) => FrameContext::new(fam, Placement::default(), window)?.contraction(),
            Err(e) => {
                r.notes.push(format!("eta {eta}: {e}"));
                f64::NAN
            }
        };
        if c < 1.0 {
            largest = Some(largest.map_or(eta, |l: f64| l.max(eta)));
        }
        sweep.push(vec![num(eta), num(c)]);
    }
    r.notes.push(match largest {
        Some(e) => format!("largest swept eta with |I - T| < 1 on the span: {e}"),
        None => "no swept eta contracts".into(),
    });
    r.gates.push(Gate::new(
        "contraction",
        ctx.contraction() < 1.0,
        format!("|I - T| = {:.4} at eta = {}", ctx.contraction(), cfg.eta),
    ));
    r.tables.push(("residuals".into(), res));
    r.tables.push(("eta_sweep".into(), sweep));
    Ok(finish(r, t0))
}

fn decay_table(scan: &crate::frame::DecayScan) -> Table {
    Table::from_csv(&scan.to_csv())
}

fn slope_text(fit: Option<LineFit>) -> String {
    fit.map_or("no fit".into(), |f| {
        format!(
            "slope {:.3} (rms {:.3}, {} points)",
            f.slope, f.rms, f.points
        )
    })
}

/// Gram decay `max|⟨h^η_J,h^η_I⟩|` vs dtree, gated at slope `≤ −κ + 0.5`.
pub fn gram_decay_gate(cfg: &ExperimentConfig, kappa: usize) -> Result<(Gate, Table)> {
    let ctx = FrameContext::new(
        AtomFamily::new(kappa, cfg.eta)?,
        Placement::default(),
        Window::new(cfg.window.0, cfg.window.1)?,
    )?;
    let scan = ctx.gram_decay_scan(PairFilter::All, 6)?;
    let slope = scan.slope();
    let target = -(kappa as f64) + 0.5;
    let gate = Gate::new(
        &format!("gram_decay_k{kappa}"),
        slope.is_some_and(|s| s <= target),
        format!(
            "{} over dtree {:?}; need <= {target}",
            slope_text(scan.fit),
            scan.fit_range
        ),
    );
    Ok((gate, decay_table(&scan)))
}

/// Reference squares for the localization scan: central squares on two levels.
fn central_squares(window: (i32, i32)) -> Vec<DyadicSquare> {
    let mut v = Vec::new();
    for l in [window.1, (window.0 + 1).min(window.1)] {
        let h = (1i64 << l.max(0)) / 2;
        let q = DyadicSquare {
            level: l,
            ix: h,
            iy: h.max(1) - 1,
        };
        if !v.contains(&q) {
            v.push(q);
        }
    }
    v
}

/// Entries of `T⁻¹` vs dtree, gated at slope `≤ −(κ−3) + 0.5`.
pub fn well_localized_gate(cfg: &ExperimentConfig, kappa: usize) -> Result<(Gate, Table)> {
    let ctx = FrameContext::new(
        AtomFamily::new(kappa, cfg.eta)?,
        Placement::default(),
        Window::new(cfg.window.0, cfg.window.1)?,
    )?;
    let scan = ctx.well_localized_scan(&central_squares(cfg.window), 1e-10, 6)?;
    let slope = scan.t_inv.slope();
    let target = -(kappa as f64 - 3.0) + 0.5;
    let gate = Gate::new(
        &format!("well_localized_k{kappa}"),
        slope.is_some_and(|s| s <= target),
        format!(
            "T^-1 {}; need <= {target}; T^-2 {}; majorant {}",
            slope_text(scan.t_inv.fit),
            slope_text(scan.t_inv2.fit),
            slope_text(scan.majorant.fit)
        ),
    );
    let mut t = Table::new(&["dtree", "t_inv", "t_inv2", "majorant"]);
    for row in &scan.t_inv.rows {
        let d = row.dtree;
        t.push(vec![
            d.to_string(),
            num(row.max_abs),
            opt(scan.t_inv2.max_at(d)),
            opt(scan.majorant.max_at(d)),
        ]);
    }
    Ok((gate, t))
}

/// Result of the scale-concentration scans.
#[derive(Clone, Debug)]
pub struct ScalesOutcome {
    pub gate: Gate,
    pub concentration: f64,
    /// Concentration at `|u| = 2π·2^{2s}`, reported only.
    pub concentration_2pi: f64,
    pub fine_rate: Option<f64>,
    pub tables: Vec<(String, Table)>,
}

/// Mass of `M_uφ_I` coefficients within two levels of `2s` at
/// `|u| = multiplier·2^{2s}`, gated at `≥ 0.95`.
pub fn scales_gate(cfg: &ExperimentConfig) -> Result<ScalesOutcome> {
    let s = cfg.scales_s;
    if s < 1 {
        return Err(Error::Config("scales_s must be at least 1".into()));
    }
    let fam = AtomFamily::new(cfg.kappa, cfg.eta)?;
    let place = Placement::default();
    let h = 1i64 << (s - 1);
    let i = DyadicSquare::new(s, h - 1, h)?;
    let th: f64 = 0.3;
    let base = ((2 * s) as f64).exp2();
    let osc = OscSettings::default();
    let scan = |m: f64| {
        scales_decay_scan(
            &fam,
            &place,
            &i,
            [m * base * th.cos(), m * base * th.sin()],
            cfg.scales_levels,
            &osc,
        )
    };
    let lit = scan(cfg.scales_multiplier)?;
    let wide = scan(2.0 * std::f64::consts::PI)?;
    let mut profile = Table::new(&["multiplier", "level", "mass_fraction"]);
    for (sc, m) in [
        (&lit, cfg.scales_multiplier),
        (&wide, 2.0 * std::f64::consts::PI),
    ] {
        for (l, f) in &sc.level_mass {
            profile.push(vec![num(m), l.to_string(), num(*f)]);
        }
    }
    let c = lit.concentration(2);
    let c2 = wide.concentration(2);
    let gate = Gate::new(
        "scale_concentration",
        c >= 0.95,
        format!(
            "mass within levels 2s±2 = {c:.4} at |u| = {}·2^(2s), s = {s}; at |u| = 2π·2^(2s): {c2:.4}; fine-regime rate {}",
            cfg.scales_multiplier,
            opt(lit.fine_rate())
        ),
    );
    Ok(ScalesOutcome {
        gate,
        concentration: c,
        concentration_2pi: c2,
        fine_rate: lit.fine_rate(),
        tables: vec![
            ("scales_coefficients".into(), Table::from_csv(&lit.to_csv())),
            ("scales_profile".into(), profile),
        ],
    })
}

/// `mod_factorization_check` on `n` interior pairs, gated at `gap < 1e-6·|lhs|`.
pub fn factorization_gate(cfg: &ExperimentConfig, n: usize) -> Result<(Gate, Table)> {
    let fam = AtomFamily::new(cfg.kappa, cfg.eta)?;
    let place = Placement::new([-0.25, -0.25], 0.5)?;
    let osc = OscSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfac7);
    let mut pairs = Vec::new();
    for i in DyadicSquare::ROOT.descendants(1) {
        let plateau = Father::on(&i, &place).plateau();
        for l in [3, 4] {
            for j in i.descendants(l) {
                let r = place.square(&j).dilate(1.0 + fam.eta());
                if r.inside_open(&plateau) && r.inside_open(&place.square(&i)) {
                    pairs.push((i, j));
                }
            }
        }
    }
    let mut t = Table::new(&[
        "i_level", "i_ix", "i_iy", "j_level", "j_ix", "j_iy", "u1", "u2", "atom", "lhs_abs", "gap",
    ]);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    while count < n && !pairs.is_empty() {
        let (i, j) = pairs.swap_remove(rng.gen_range(0..pairs.len()));
        let th: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let m: f64 = rng.gen_range(16.0..64.0);
        let u = [m * th.cos(), m * th.sin()];
        let a = rng.gen_range(0..fam.dim());
        let f = mod_factorization_check(&fam, &place, &i, &j, u, a, &osc)?;
        let rel = f.gap / f.lhs.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        t.push(vec![
            i.level.to_string(),
            i.ix.to_string(),
            i.iy.to_string(),
            j.level.to_string(),
            j.ix.to_string(),
            j.iy.to_string(),
            num(u[0]),
            num(u[1]),
            a.to_string(),
            num(f.lhs.norm()),
            num(f.gap),
        ]);
        count += 1;
    }
    let gate = Gate::new(
        "mod_factorization",
        count == n && worst < 1e-6,
        format!("{count} pairs, max |lhs - rhs|/|lhs| = {worst:.3e} (< 1e-6)"),
    );
    Ok((gate, t))
}

/// `|Sτ_zF − τ_zSF|` for a random level-4 expansion shifted by a level-2 step.
pub fn translation_gate(cfg: &ExperimentConfig) -> Result<(Gate, Table)> {
    let fam = AtomFamily::new(cfg.kappa, cfg.eta)?;
    let place = Placement::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a05);
    let f: BTreeMap<(DyadicSquare, usize), f64> = DyadicSquare::new(2, 1, 1)?
        .descendants(4)
        .into_iter()
        .flat_map(|q| (0..fam.dim()).map(move |a| (q, a)))
        .map(|k| (k, rng.gen_range(-1.0..1.0)))
        .collect();
    let mut t = Table::new(&["z1", "z2", "max_deviation"]);
    let mut worst: f64 = 0.0;
    for z in [[0.25, 0.0], [0.0, -0.25], [0.25, -0.25]] {
        let d = translation_commutation_check(&fam, &place, 2, z, &f, 24)?;
        worst = worst.max(d);
        t.push(vec![num(z[0]), num(z[1]), num(d)]);
    }
    Ok((
        Gate::new(
            "translation_commutation",
            worst < 1e-8,
            format!("max deviation {worst:.3e} (< 1e-8)"),
        ),
        t,
    ))
}

/// Gram decay, well-localization, scale concentration, factorization and
/// translation checks at the configured `κ`.
pub fn run_decay_suite(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let mut r = SuiteReport::new("decay", cfg);
    if cfg.window.1 <= cfg.window.0 {
        return Err(Error::Config(
            "decay suite needs a window of at least two levels".into(),
        ));
    }
    let (g, t) = gram_decay_gate(cfg, cfg.kappa)?;
    r.gates.push(g);
    r.tables.push(("gram_decay".into(), t));
    match well_localized_gate(cfg, cfg.kappa) {
        Ok((g, t)) => {
            r.gates.push(g);
            r.tables.push(("well_localized".into(), t));
        }
        Err(e) => r.gates.push(Gate::new(
            &format!("well_localized_k{}", cfg.kappa),
            false,
            e.to_string(),
        )),
    }
    let sc = scales_gate(cfg)?;
    r.gates.push(sc.gate);
    r.tables.extend(sc.tables);
    let (g, t) = factorization_gate(cfg, 20)?;
    r.gates.push(g);
    r.tables.push(("factorization".into(), t));
    let (g, t) = translation_gate(cfg)?;
    r.gates.push(g);
    r.tables.push(("translation".into(), t));
    Ok(finish(r, t0))
}

/// Scale concentration of `M_uφ_I` coefficients.
pub fn run_scales(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let mut r = SuiteReport::new("scales", cfg);
    let sc = scales_gate(cfg)?;
    r.notes.push(format!(
        "concentration {:.4} (configured |u|), {:.4} (|u| = 2π·2^(2s)); fine-regime rate {}",
        sc.concentration,
        sc.concentration_2pi,
        opt(sc.fine_rate)
    ));
    r.gates.push(sc.gate);
    r.tables.extend(sc.tables);
    Ok(finish(r, t0))
}

/// `U = [−¼,¼]²`, the physical image of the normalized base square.
pub fn base_placement() -> Placement {
    Placement::new([-0.25, -0.25], 0.5).expect("valid placement")
}

/// Level-2 squares of `U` with physical side 1/8 and mutual gaps ≥ 1/8.
pub fn triple_squares() -> [DyadicSquare; 3] {
    [
        DyadicSquare {
            level: 2,
            ix: 0,
            iy: 0,
        },
        DyadicSquare {
            level: 2,
            ix: 2,
            iy: 0,
        },
        DyadicSquare {
            level: 2,
            ix: 0,
            iy: 2,
        },
    ]
}

/// Whether the fixed triple is ν-disjoint at the configured `ν`.
pub fn triple_is_nu_disjoint(cfg: &ExperimentConfig) -> Result<bool> {
    let place = base_placement();
    let r = triple_squares().map(|q| place.square(&q));
    nu_disjoint_triple([&r[0], &r[1], &r[2]], cfg.nu)
}

/// Base-tree level of squares with physical side `2^{−s}` in `U`.
fn outer_level(s: i32) -> i32 {
    s - 1
}

fn seeded(cfg: &ExperimentConfig, s: i32, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ ((s as u64) << 32) ^ (salt << 48))
}

/// Gauss rule on `[lo, hi]` whose node spacing resolves phase rate `rate` at
/// eight points per wavelength, with breakpoints and single-panel bands.
fn source_rule(
    lo: f64,
    hi: f64,
    breaks: &[f64],
    bands: &[(f64, f64)],
    rate: f64,
    cap: f64,
) -> Rule1D {
    let need = if rate > 0.0 {
        2.0 * std::f64::consts::PI / rate / 8.0
    } else {
        f64::INFINITY
    };
    let mut w = (8.0 * need).min(cap).min(hi - lo);
    loop {
        let mut rb = RuleBuilder::new(lo, hi)
            .order(16)
            .max_width(w)
            .band_panels(1);
        for &b in breaks {
            if b > lo && b < hi {
                rb.breakpoint(b);
            }
        }
        for &(a, b) in bands {
            let (a, b) = (a.max(lo), b.min(hi));
            if a < b {
                rb.band(a, b);
            }
        }
        let rule = rb.build();
        if rule.max_spacing() <= need || w < 1e-6 {
            return rule;
        }
        w *= 0.5;
    }
}

fn phase_rate(radius: f64, lo: f64, hi: f64, u: f64) -> f64 {
    let xmax = lo.abs().max(hi.abs());
    radius * (1.0 + 4.0 * xmax * xmax).sqrt() + u.abs()
}

fn father_breaks(phi: &Father, axis: usize) -> [f64; 4] {
    let r = phi.geom.rect();
    let (a, b) = if axis == 0 {
        (r.x0, r.x1)
    } else {
        (r.y0, r.y1)
    };
    let ramp = crate::modulation::RAMP * phi.geom.side;
    [a - ramp, a, b, b + ramp]
}

/// Random polynomial of degree ≤ 3 on `rect`, scaled to sup 1 on a 33×33 lattice.
fn random_profile(rect: Rect, rng: &mut ChaCha8Rng) -> impl Fn(f64, f64) -> f64 {
    let c: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let raw = move |x: f64, y: f64| {
        let xs = (2.0 * x - rect.x0 - rect.x1) / rect.width();
        let ys = (2.0 * y - rect.y0 - rect.y1) / rect.height();
        let mut acc = 0.0;
        for a in 0..4 {
            for b in 0..4 - a {
                acc += c[4 * a + b] * xs.powi(a as i32) * ys.powi(b as i32);
            }
        }
        acc
    };
    let mut sup: f64 = 0.0;
    for i in 0..=32 {
        for j in 0..=32 {
            let x = rect.x0 + rect.width() * i as f64 / 32.0;
            let y = rect.y0 + rect.height() * j as f64 / 32.0;
            sup = sup.max(raw(x, y).abs());
        }
    }
    move |x: f64, y: f64| {
        if rect.contains_closed([x, y]) {
            raw(x, y) / sup
        } else {
            0.0
        }
    }
}

/// Father pieces `φ_I f_k` and modulations for the three functions of one scale.
#[derive(Clone, Debug)]
pub struct TripleInput {
    pub s: i32,
    pub pieces: [BTreeMap<DyadicSquare, SampledField2D>; 3],
    pub u: [ModulationSequence; 3],
    /// `‖f_k‖_∞` on the sampling lattice.
    pub sup: [f64; 3],
}

impl TripleInput {
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for p in out.pieces.iter_mut() {
            for f in p.values_mut() {
                *f = f.scale(Complex64::new(c, 0.0));
            }
        }
        out.sup = self.sup.map(|v| v * c.abs());
        out
    }
}

/// Random `f_k ∈ L^∞(U_k)` with `‖f_k‖_∞ = 1`, split into father pieces at
/// physical scale `2^{−s}`, with `|u_I| = 2^{2s}`.
pub fn condition_a_input(cfg: &ExperimentConfig, s: i32) -> Result<TripleInput> {
    let place = base_placement();
    let n = outer_level(s);
    let radius = cfg.ball_radius(s);
    let mut rng = seeded(cfg, s, 0xa);
    let tri = triple_squares();
    let mut pieces: [BTreeMap<DyadicSquare, SampledField2D>; 3] = Default::default();
    let mut us = Vec::new();
    for k in 0..3 {
        let rk = place.square(&tri[k]);
        let f = random_profile(rk, &mut rng);
        for i in DyadicSquare::ROOT.descendants(n) {
            let phi = Father::on(&i, &place);
            let inter = phi.support().intersection(&rk);
            if inter.is_empty() || inter.width() <= 0.0 || inter.height() <= 0.0 {
                continue;
            }
            let cap = 0.1 * phi.geom.side;
            let mx = (2 * s) as f64;
            let umax = mx.exp2();
            let rx = source_rule(
                inter.x0,
                inter.x1,
                &father_breaks(&phi, 0),
                &[],
                phase_rate(radius, inter.x0, inter.x1, umax),
                cap,
            );
            let ry = source_rule(
                inter.y0,
                inter.y1,
                &father_breaks(&phi, 1),
                &[],
                phase_rate(radius, inter.y0, inter.y1, umax),
                cap,
            );
            let grid = TensorGrid::new(rx, ry);
            pieces[k].insert(
                i,
                SampledField2D::from_real_fn(grid, |x, y| phi.eval([x, y]) * f(x, y)),
            );
        }
        let keys: Vec<DyadicSquare> = pieces[k].keys().copied().collect();
        us.push(ModulationSequence::sample(n, s, &keys, 0.0, &mut rng)?);
    }
    let u: [ModulationSequence; 3] = us.try_into().expect("three sequences");
    Ok(TripleInput {
        s,
        pieces,
        u,
        sup: [1.0; 3],
    })
}

fn product_norm(grid: &Arc<FrequencyGrid>, f: [&RealField; 3], q: f64, r: f64) -> Result<f64> {
    let prod = RealField {
        grid: grid.clone(),
        values: (0..grid.len())
            .map(|i| f[0].values[i] * f[1].values[i] * f[2].values[i])
            .collect(),
    };
    prod.lq_norm(q / 3.0, r)
}

/// `‖Π_k 𝒮_Fourier f_k‖_{L^{q/3}(B(0,R))}`.
pub fn condition_a_lhs(cfg: &ExperimentConfig, input: &TripleInput) -> Result<f64> {
    let r = cfg.ball_radius(input.s);
    let grid = FrequencyGrid::new(r, cfg.freq_spacing)?;
    let sq: Vec<RealField> = (0..3)
        .map(|k| fourier_square_function(&input.pieces[k], &input.u[k], &grid))
        .collect::<Result<_>>()?;
    product_norm(&grid, [&sq[0], &sq[1], &sq[2]], cfg.q, r)
}

fn fit_row(t: &mut Table, label: &str, xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let fit = fit_log2(xs, ys);
    t.push(vec![
        label.into(),
        opt(fit.map(|f| f.slope)),
        opt(fit.map(|f| f.intercept.exp2())),
        opt(fit.map(|f| f.rms)),
        fit.map_or(0, |f| f.points).to_string(),
    ]);
    fit
}

/// Condition 𝒜 across the s-list with the fitted growth exponent.
pub fn run_condition_a(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let mut r = SuiteReport::new("condition-a", cfg);
    let nu_ok = triple_is_nu_disjoint(cfg)?;
    let mut rows = Table::new(&[
        "s",
        "radius",
        "lhs",
        "sup_product",
        "pieces",
        "nu_disjoint",
        "scale_admissible",
    ]);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut finite = true;
    for &s in &cfg.s_list {
        let input = condition_a_input(cfg, s)?;
        let lhs = condition_a_lhs(cfg, &input)?;
        finite &= lhs.is_finite() && lhs >= 0.0;
        let npieces: usize = input.pieces.iter().map(|p| p.len()).sum();
        rows.push(vec![
            s.to_string(),
            num(cfg.ball_radius(s)),
            num(lhs),
            num(input.sup.iter().product()),
            npieces.to_string(),
            nu_ok.to_string(),
            cfg.scale_admissible(s).to_string(),
        ]);
        xs.push(s as f64);
        ys.push(lhs);
        log::info!("condition-a s={s}: lhs {lhs:.4e}");
    }
    let mut fits = Table::new(&["quantity", "epsilon_hat", "constant", "rms", "points"]);
    let fit = fit_row(&mut fits, "lhs_vs_s", &xs, &ys);
    r.gates.push(Gate::new(
        "lhs_finite",
        finite,
        "every LHS finite and non-negative",
    ));
    if cfg.s_list.len() >= 2 {
        r.gates.push(Gate::new(
            "fit",
            fit.is_some(),
            format!("epsilon_hat {}", opt(fit.map(|f| f.slope))),
        ));
    }
    if !nu_ok {
        r.notes
            .push(format!("warning: the triple is not {}-disjoint", cfg.nu));
    }
    for &s in cfg.s_list.iter().filter(|s| !cfg.scale_admissible(**s)) {
        r.notes.push(format!(
            "warning: s = {s} violates 2^-s <= nu; row reported, not excluded"
        ));
    }
    r.tables.push(("condition_a".into(), rows));
    r.tables.push(("condition_a_fit".into(), fits));
    Ok(finish(r, t0))
}

/// Three Kakeya-type polynomials at outer physical scale `2^{−s}`: outer
/// squares inside `U_k` once they fit (`2^{−s} ≤ 1/8`), otherwise all of `U`.
pub fn condition_b_input(cfg: &ExperimentConfig, s: i32) -> Result<([KakeyaPolynomial; 3], bool)> {
    let place = base_placement();
    let n = outer_level(s);
    let all = DyadicSquare::ROOT.descendants(n);
    let tri = triple_squares();
    let inside = n >= tri[0].level;
    let mut rng = seeded(cfg, s, 0xb);
    let fam = AtomFamily::new(cfg.kappa, cfg.eta)?;
    let mut w = vec![0.0; fam.dim()];
    w[0] = 1.0;
    let mut out = Vec::new();
    for q in tri {
        let outer: Vec<DyadicSquare> = if inside {
            all.iter().copied().filter(|i| q.contains(i)).collect()
        } else {
            all.clone()
        };
        let u = ModulationSequence::sample(n, s, &all, 0.0, &mut rng)?;
        let b = outer
            .iter()
            .map(|i| {
                (
                    *i,
                    Complex64::from_polar(
                        rng.gen_range(0.5..1.0),
                        rng.gen_range(0.0..2.0 * std::f64::consts::PI),
                    ),
                )
            })
            .collect();
        out.push(KakeyaPolynomial::build(
            fam.clone(),
            place,
            b,
            u,
            w.clone(),
            8,
        )?);
    }
    let nu_ok = inside && triple_is_nu_disjoint(cfg)?;
    Ok((out.try_into().expect("three polynomials"), nu_ok))
}

/// `𝒮_Fourier` of the unmodulated polynomial with the modulations of `k`.
pub fn a_form_square_function(
    k: &KakeyaPolynomial,
    grid: &Arc<FrequencyGrid>,
) -> Result<RealField> {
    let g = k.unmodulated();
    let place = k.place;
    let side_j = place.side * (-k.t as f64).exp2();
    let rho = 0.25 * k.fam.eta() * side_j;
    let mut supp = Rect::new(
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for q in k.b.keys() {
        let r = place.square(q);
        supp = Rect::new(
            supp.x0.min(r.x0 - rho),
            supp.x1.max(r.x1 + rho),
            supp.y0.min(r.y0 - rho),
            supp.y1.max(r.y1 + rho),
        );
    }
    let edges = |o: f64, lo: f64, hi: f64| -> Vec<(f64, f64)> {
        let m0 = ((lo - o) / side_j).floor() as i64;
        let m1 = ((hi - o) / side_j).ceil() as i64;
        (m0..=m1)
            .map(|m| o + m as f64 * side_j)
            .map(|p| (p - rho, p + rho))
            .collect()
    };
    let mut pieces = BTreeMap::new();
    for (i, v) in &k.u.u {
        let phi = Father::on(i, &place);
        let inter = phi.support().intersection(&supp);
        if inter.is_empty() || inter.width() <= 0.0 || inter.height() <= 0.0 {
            continue;
        }
        let cap = 0.5 * side_j;
        let rx = source_rule(
            inter.x0,
            inter.x1,
            &father_breaks(&phi, 0),
            &edges(place.origin[0], inter.x0, inter.x1),
            phase_rate(grid.radius, inter.x0, inter.x1, v[0]),
            cap,
        );
        let ry = source_rule(
            inter.y0,
            inter.y1,
            &father_breaks(&phi, 1),
            &edges(place.origin[1], inter.y0, inter.y1),
            phase_rate(grid.radius, inter.y0, inter.y1, v[1]),
            cap,
        );
        let tg = TensorGrid::new(rx, ry);
        let gv = g.field(tg.clone());
        let values = gv
            .values
            .iter()
            .enumerate()
            .map(|(n, v)| v * phi.eval(tg.point(n)))
            .collect();
        pieces.insert(*i, SampledField2D { grid: tg, values });
    }
    fourier_square_function(&pieces, &k.u, grid)
}

/// One scale of condition ℬ.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBRow {
    pub s: i32,
    pub t: i32,
    pub radius: f64,
    pub mc_lhs: f64,
    pub mc_std_error: f64,
    pub square_fn_lhs: f64,
    pub ratio: f64,
    pub a_lhs: Option<f64>,
    pub outer: [usize; 3],
    pub nu_disjoint: bool,
}

pub fn condition_b_row(cfg: &ExperimentConfig, s: i32, with_a: bool) -> Result<ConditionBRow> {
    let (polys, nu_ok) = condition_b_input(cfg, s)?;
    let r = cfg.ball_radius(s);
    let grid = FrequencyGrid::new(r, cfg.freq_spacing)?;
    let set = AtomicSettings::default();
    let blocks: Vec<_> = polys
        .iter()
        .map(|k| kakeya_blocks(k, &grid, &set))
        .collect::<Result<_>>()?;
    let kh = khintchine_trilinear(
        [&blocks[0], &blocks[1], &blocks[2]],
        &grid,
        cfg.q,
        r,
        cfg.mc_samples,
        cfg.seed ^ ((s as u64) << 16),
    )?;
    let a_lhs = if with_a {
        let sq: Vec<RealField> = polys
            .iter()
            .map(|k| a_form_square_function(k, &grid))
            .collect::<Result<_>>()?;
        Some(product_norm(&grid, [&sq[0], &sq[1], &sq[2]], cfg.q, r)?)
    } else {
        None
    };
    Ok(ConditionBRow {
        s,
        t: 2 * s,
        radius: r,
        mc_lhs: kh.mc_mean,
        mc_std_error: kh.mc_std_error,
        square_fn_lhs: kh.square_fn_value,
        ratio: kh.ratio,
        a_lhs,
        outer: [polys[0].b.len(), polys[1].b.len(), polys[2].b.len()],
        nu_disjoint: nu_ok,
    })
}

/// Condition ℬ in expectation and square-function form, with the 𝒜-form on
/// the same inputs for `s ≤ compare_a_max_s`.
pub fn run_condition_b(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let mut r = SuiteReport::new("condition-b", cfg);
    let mut rows = Table::new(&[
        "s",
        "t",
        "radius",
        "mc_lhs",
        "mc_std_error",
        "square_fn_lhs",
        "mc_over_square_fn",
        "a_lhs",
        "b_over_a",
        "outer_squares",
        "nu_disjoint",
    ]);
    let (mut ts, mut mc, mut sqv) = (Vec::new(), Vec::new(), Vec::new());
    let mut khintchine_ok = true;
    let mut order_ok = true;
    let mut compared = 0;
    for &s in &cfg.s_list {
        let row = condition_b_row(cfg, s, s <= cfg.compare_a_max_s)?;
        khintchine_ok &= (1.0 / 3.0..=3.0).contains(&row.ratio);
        let ba = row.a_lhs.map(|a| row.mc_lhs / a);
        if let Some(x) = ba {
            order_ok &= x <= 3.0;
            compared += 1;
        }
        rows.push(vec![
            s.to_string(),
            row.t.to_string(),
            num(row.radius),
            num(row.mc_lhs),
            num(row.mc_std_error),
            num(row.square_fn_lhs),
            num(row.ratio),
            opt(row.a_lhs),
            opt(ba),
            row.outer.map(|n| n.to_string()).join("/"),
            row.nu_disjoint.to_string(),
        ]);
        if !row.nu_disjoint {
            r.notes.push(format!(
                "warning: s = {s} inputs are not supported on a nu-disjoint triple"
            ));
        }
        ts.push(row.t as f64);
        mc.push(row.mc_lhs);
        sqv.push(row.square_fn_lhs);
        log::info!(
            "condition-b s={s}: mc {:.4e} square {:.4e}",
            row.mc_lhs,
            row.square_fn_lhs
        );
    }
    let mut fits = Table::new(&["quantity", "epsilon_hat", "constant", "rms", "points"]);
    fit_row(&mut fits, "mc_lhs_vs_t", &ts, &mc);
    fit_row(&mut fits, "square_fn_lhs_vs_t", &ts, &sqv);
    r.gates.push(Gate::new(
        "khintchine_ratio",
        khintchine_ok,
        "MC / square-function ratio in [1/3, 3] at every s",
    ));
    if compared > 0 {
        r.gates.push(Gate::new(
            "b_le_3a",
            order_ok,
            format!("B-form <= 3 x A-form at {compared} scales"),
        ));
    }
    r.tables.push(("condition_b".into(), rows));
    r.tables.push(("condition_b_fit".into(), fits));
    Ok(finish(r, t0))
}

/// Tube-overlap norms across the δ-list with fitted exponents, and the
/// trilinear functional on ν-separated caps.
pub fn run_kakeya_suite(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let mut r = SuiteReport::new("kakeya", cfg);
    let spacing = |d: f64| Some(cfg.raster_fraction * d);
    let cap = DEFAULT_CELL_CAP;
    let mut norms = Table::new(&[
        "family",
        "delta",
        "tubes",
        "min_angle",
        "norm_3_2",
        "total_volume",
        "normalized",
    ]);
    let mut fits = Table::new(&["quantity", "epsilon_hat", "constant", "rms", "points"]);
    let mut separated = true;
    for name in &cfg.kakeya_families {
        let kind: FamilyKind = name.parse()?;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for &d in &cfg.kakeya_deltas {
            let f = generate_family(kind, d, cfg.seed)?;
            separated &= f.min_angle >= d * (1.0 - 1e-9);
            let n = overlap_norm(&f, 1.5, spacing(d), cap)?;
            let vol: f64 = f.tubes.iter().map(Tube::volume).sum();
            let normalized = n / vol.powf(2.0 / 3.0);
            norms.push(vec![
                name.clone(),
                num(d),
                f.len().to_string(),
                num(f.min_angle),
                num(n),
                num(vol),
                num(normalized),
            ]);
            xs.push((1.0 / d).log2());
            ys.push(normalized);
        }
        if xs.len() >= 2 {
            fit_row(&mut fits, &format!("{name}_linear"), &xs, &ys);
        }
    }
    let caps = nu_separated_caps(0.6, cfg.nu)?;
    let mut tri = Table::new(&[
        "delta",
        "tubes",
        "trilinear_norm",
        "volume_product",
        "normalized",
    ]);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &d in &cfg.kakeya_deltas {
        let fams: Vec<TubeFamily> = caps
            .iter()
            .enumerate()
            .map(|(k, c)| {
                generate_family_in_cap(FamilyKind::Random, d, c, cfg.seed.wrapping_add(k as u64))
            })
            .collect::<Result<_>>()?;
        let n = trilinear_overlap_norm([&fams[0], &fams[1], &fams[2]], spacing(d), cap)?;
        let vp: f64 = fams
            .iter()
            .map(|f| f.tubes.iter().map(Tube::volume).sum::<f64>())
            .product();
        let counts = fams
            .iter()
            .map(|f| f.len().to_string())
            .collect::<Vec<_>>()
            .join("/");
        tri.push(vec![num(d), counts, num(n), num(vp), num(n / vp)]);
        xs.push((1.0 / d).log2());
        ys.push(n / vp);
    }
    if xs.len() >= 2 {
        fit_row(&mut fits, "random_trilinear", &xs, &ys);
    }
    r.gates.push(Gate::new(
        "separation",
        separated,
        "every family has pairwise direction angles >= delta",
    ));
    kakeya_checks(cfg, &mut r)?;
    r.tables.push(("tube_norms".into(), norms));
    r.tables.push(("trilinear_norms".into(), tri));
    r.tables.push(("kakeya_fit".into(), fits));
    Ok(finish(r, t0))
}

/// Single-tube volume, disjoint additivity and permutation symmetry at `check_delta`.
pub fn kakeya_checks(cfg: &ExperimentConfig, r: &mut SuiteReport) -> Result<()> {
    let d = cfg.check_delta;
    let spacing = Some(cfg.raster_fraction * d);
    let cap = DEFAULT_CELL_CAP;
    let fam = generate_family(FamilyKind::Random, d, cfg.seed)?;
    let one = TubeFamily::new(vec![fam.tubes[0]], d)?;
    let want = (std::f64::consts::PI * d * d / 4.0).powf(2.0 / 3.0);
    let got = overlap_norm(&one, 1.5, spacing, cap)?;
    let err = (got / want - 1.0).abs();
    r.gates.push(Gate::new(
        "single_tube",
        err < 0.05,
        format!("L^3/2 norm {got:.5e} vs (pi d^2/4)^(2/3) = {want:.5e}, rel. error {err:.4}"),
    ));
    let a = Tube::new([0.0, 0.0, 1.0], [-0.5, -0.5, 0.0], d)?;
    let b = Tube::new([0.2, 0.1, 1.0], [0.5, 0.4, 0.2], d)?;
    let both = TubeFamily::new(vec![a, b], d)?;
    let p = 1.5;
    let spec = crate::kakeya::RasterSpec::covering(&[&both], cfg.raster_fraction * d, cap)?;
    let n = |ts: Vec<Tube>| -> Result<f64> {
        crate::kakeya::Raster::new(&TubeFamily::new(ts, d)?, spec)?.lp_norm(p)
    };
    let sum = n(vec![a])?.powf(p) + n(vec![b])?.powf(p);
    let gap = (n(vec![a, b])?.powf(p) - sum).abs() / sum;
    r.gates.push(Gate::new(
        "disjoint_additivity",
        gap < 1e-12,
        format!("relative gap {gap:.2e}"),
    ));
    let caps = nu_separated_caps(0.6, cfg.nu)?;
    let fams: Vec<TubeFamily> = caps
        .iter()
        .enumerate()
        .map(|(k, c)| {
            generate_family_in_cap(FamilyKind::Random, d, c, cfg.seed.wrapping_add(k as u64))
        })
        .collect::<Result<_>>()?;
    let t1 = trilinear_overlap_norm([&fams[0], &fams[1], &fams[2]], spacing, cap)?;
    let t2 = trilinear_overlap_norm([&fams[2], &fams[0], &fams[1]], spacing, cap)?;
    r.gates.push(Gate::new(
        "trilinear_symmetry",
        (t1 - t2).abs() <= 1e-12 * t1.abs(),
        format!("{t1:.6e} vs permuted {t2:.6e}"),
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_and_hash() {
        let raw =
            RawConfig::parse("# comment\n q = 5 \n s_list = 1, 2\n\nwindow = 0,2 # trailing\n")
                .unwrap();
        let c = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(c.q, 5.0);
        assert_eq!(c.s_list, vec![1, 2]);
        assert_eq!(c.window, (0, 2));
        assert_eq!(c.hash(), ExperimentConfig::from_raw(&raw).unwrap().hash());
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
        assert_eq!(c.hash().len(), 64);
        let again = RawConfig::parse(&c.canonical()).unwrap();
        assert_eq!(ExperimentConfig::from_raw(&again).unwrap(), c);
        for bad in [
            "q",
            "q = 3",
            "nope = 1",
            "q = x",
            "q = 4\nq = 5",
            "delta = 1",
            "kakeya_families = cone",
        ] {
            assert!(
                ExperimentConfig::from_raw(&RawConfig::parse(bad).unwrap_or_default()).is_err()
                    || RawConfig::parse(bad).is_err(),
                "{bad}"
            );
        }
    }

    #[test]
    fn admissibility_and_radius() {
        let c = ExperimentConfig::default();
        assert!(!c.scale_admissible(2));
        assert!(c.scale_admissible(3));
        assert_eq!(c.ball_radius(2), 16.0);
        assert_eq!(c.ball_radius(3), 32.0);
        assert!(triple_is_nu_disjoint(&c).unwrap());
        let wide = ExperimentConfig { nu: 0.2, ..c };
        assert!(!triple_is_nu_disjoint(&wide).unwrap());
    }

    #[test]
    fn tables_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), num(0.5)]);
        assert_eq!(t.to_csv(), "a,b\n1,5.000000e-1\n");
        assert_eq!(Table::from_csv(&t.to_csv()), t);
        assert_eq!(num(f64::NAN), "nan");
    }

    #[test]
    fn condition_a_is_trilinear() {
        let cfg = ExperimentConfig {
            s_list: vec![1],
            ..Default::default()
        };
        let input = condition_a_input(&cfg, 1).unwrap();
        let base = condition_a_lhs(&cfg, &input).unwrap();
        assert!(base > 0.0);
        let doubled = condition_a_lhs(&cfg, &input.scaled(2.0)).unwrap();
        assert!((doubled / base - 8.0).abs() < 1e-9, "{}", doubled / base);
        assert_eq!(condition_a_lhs(&cfg, &input.scaled(0.0)).unwrap(), 0.0);
        let again = condition_a_lhs(&cfg, &condition_a_input(&cfg, 1).unwrap()).unwrap();
        assert_eq!(again, base);
    }

    #[test]
    fn condition_b_singleton_is_exact() {
        let cfg = ExperimentConfig {
            mc_samples: 50,
            ..Default::default()
        };
        let row = condition_b_row(&cfg, 1, false).unwrap();
        assert_eq!(row.outer, [1, 1, 1]);
        assert!((row.ratio - 1.0).abs() < 1e-12);
        assert!(row.a_lhs.is_none());
        assert!(!row.nu_disjoint);
    }

    #[test]
    fn reports_embed_the_hash() {
        let cfg = ExperimentConfig {
            basis_kappas: vec![1],
            ..Default::default()
        };
        let r = run_basis(&cfg).unwrap();
        assert!(r.passed());
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(text.contains(&format!("config_hash: {}", cfg.hash())));
        let csv = std::fs::read_to_string(dir.path().join("moments.csv")).unwrap();
        assert_eq!(csv, r.table("moments").unwrap().to_csv());
        assert!(run_decay_suite(&ExperimentConfig {
            window: (1, 1),
            ..cfg
        })
        .is_err());
    }
}
