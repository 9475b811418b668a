//! Polynomial calibration of contact location and force.
//!
//! `g1` maps the contact pixel column to the chord position in mm. `gx`,
//! `gy`, `gz` map `(Dx, Dy, Dz, x2D, y2D, dPF)` to the force in N. Each map
//! uses scaled monomials with one degree cap per feature group, and the caps
//! are chosen by validation error.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, SensorGeometry};
use crate::poly::{monomial_basis, monomial_row, FeatureScale, MultiPolynomial, Polynomial1D};

pub const FEATURE_NAMES: [&str; 6] = ["Dx", "Dy", "Dz", "x2D", "y2D", "dPF"];
/// Group of each force feature: raw displacements, pixel location, potential range.
pub const FORCE_GROUPS: [usize; 6] = [0, 0, 0, 1, 1, 2];
pub const TRAIN_ROWS: [u32; 10] = [2, 3, 4, 6, 7, 9, 10, 12, 13, 14];
pub const VAL_ROWS: [u32; 3] = [5, 8, 11];

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("{rows} rows cannot determine {terms} coefficients")]
    TooFewRows { rows: usize, terms: usize },
    #[error("design matrix is rank deficient (condition {condition:e})")]
    RankDeficient { condition: f64 },
    #[error("no order combination could be fitted")]
    NoFeasibleOrders,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub row_id: u32,
    pub indenter_d_mm: f64,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    #[serde(rename = "Fx_N")]
    pub fx: f64,
    #[serde(rename = "Fy_N")]
    pub fy: f64,
    #[serde(rename = "Fz_N")]
    pub fz: f64,
    #[serde(rename = "Dx")]
    pub dx: f64,
    #[serde(rename = "Dy")]
    pub dy: f64,
    #[serde(rename = "Dz")]
    pub dz: f64,
    #[serde(rename = "x2D_px")]
    pub x2d: f64,
    #[serde(rename = "y2D_px")]
    pub y2d: f64,
    #[serde(rename = "dPF")]
    pub dpf: f64,
    #[serde(rename = "x3D_mm")]
    pub x3d_mm: f64,
}

impl CalibrationRecord {
    pub fn features(&self) -> [f64; 6] {
        [self.dx, self.dy, self.dz, self.x2d, self.y2d, self.dpf]
    }

    pub fn force(&self) -> [f64; 3] {
        [self.fx, self.fy, self.fz]
    }
}

pub fn write_records<W: Write>(w: W, records: &[CalibrationRecord]) -> Result<(), CalibrationError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| CalibrationError::Io {
        path: "<csv>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<CalibrationRecord>, CalibrationError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|rec| rec.map_err(CalibrationError::from))
        .collect()
}

pub fn load_records(path: &Path) -> Result<Vec<CalibrationRecord>, CalibrationError> {
    let f = std::fs::File::open(path).map_err(|e| CalibrationError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_records(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub train: Vec<CalibrationRecord>,
    pub val: Vec<CalibrationRecord>,
    pub test: Vec<CalibrationRecord>,
}

impl SplitDataset {
    /// Route characterization records to train or validation by row; the
    /// test set is a separate acquisition.
    pub fn from_rows(train_val: Vec<CalibrationRecord>, test: Vec<CalibrationRecord>) -> Self {
        let (val, train) = train_val.into_iter().partition(|r| VAL_ROWS.contains(&r.row_id));
        Self { train, val, test }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_order: u32,
    pub cross_terms: bool,
    /// Target interval of the feature scaling.
    pub scale_bounds: (f64, f64),
    /// Relative singular-value cutoff.
    pub rcond: f64,
    /// Validation errors within this relative margin of the best count as ties.
    pub tie_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_order: 5,
            cross_terms: true,
            scale_bounds: (-1.0, 1.0),
            rcond: 1e-10,
            tie_tolerance: 0.01,
        }
    }
}

/// Scaled design problem shared by every order combination.
struct Design {
    groups: Vec<usize>,
    scale: Vec<FeatureScale>,
    train: Vec<Vec<f64>>,
    val: Vec<Vec<f64>>,
}

impl Design {
    fn new(groups: &[usize], train_x: &[Vec<f64>], val_x: &[Vec<f64>], bounds: (f64, f64)) -> Self {
        let n = groups.len();
        let scale: Vec<FeatureScale> = (0..n)
            .map(|j| FeatureScale::fit(train_x.iter().map(|r| r[j]), bounds.0, bounds.1))
            .collect();
        let apply = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().zip(&scale).map(|(v, s)| s.apply(*v)).collect())
                .collect()
        };
        Self {
            groups: groups.to_vec(),
            train: apply(train_x),
            val: apply(val_x),
            scale,
        }
    }

    fn active(&self) -> Vec<bool> {
        self.scale.iter().map(|s| s.is_active()).collect()
    }

    fn matrix(rows: &[Vec<f64>], basis: &[Vec<u8>], max_deg: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows.len(), basis.len());
        let mut buf = vec![0.0; basis.len()];
        for (i, r) in rows.iter().enumerate() {
            monomial_row(basis, r, max_deg, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }
}

/// Least squares through a QR reduction. The cutoff applies to the singular
/// values of the triangular factor, which equal those of `a`.
fn lstsq(a: DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>, CalibrationError> {
    let qr = a.qr();
    let r = qr.r();
    let s = r.singular_values();
    let (smax, smin) = (s.max(), s.min());
    if !(smin > rcond * smax) {
        return Err(CalibrationError::RankDeficient {
            condition: smax / smin,
        });
    }
    let qtb = qr.q().tr_mul(b);
    Ok(r.solve_upper_triangular(&qtb).expect("non-singular after the cutoff"))
}

struct ComboFit {
    orders: Vec<u32>,
    basis: Vec<Vec<u8>>,
    coeffs: DMatrix<f64>,
    val_mae: Vec<f64>,
}

fn fit_combo(
    design: &Design,
    orders: &[u32],
    train_y: &DMatrix<f64>,
    val_y: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<ComboFit, CalibrationError> {
    let basis = monomial_basis(&design.groups, orders, &design.active(), opts.cross_terms);
    if design.train.len() <= basis.len() {
        return Err(CalibrationError::TooFewRows {
            rows: design.train.len(),
            terms: basis.len(),
        });
    }
    let max_deg = *orders.iter().max().unwrap() as usize + 1;
    let a = Design::matrix(&design.train, &basis, max_deg);
    let coeffs = lstsq(a, train_y, opts.rcond)?;
    let val_mae = if design.val.is_empty() {
        vec![0.0; train_y.ncols()]
    } else {
        let pred = Design::matrix(&design.val, &basis, max_deg) * &coeffs;
        (0..train_y.ncols())
            .map(|k| (0..val_y.nrows()).map(|i| (pred[(i, k)] - val_y[(i, k)]).abs()).sum::<f64>() / val_y.nrows() as f64)
            .collect()
    };
    Ok(ComboFit {
        orders: orders.to_vec(),
        basis,
        coeffs,
        val_mae,
    })
}

fn targets(ys: &[&[f64]]) -> DMatrix<f64> {
    let rows = ys.first().map_or(0, |y| y.len());
    DMatrix::from_fn(rows, ys.len(), |i, k| ys[k][i])
}

fn order_grid(n_groups: usize, max_order: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..n_groups {
        out = out
            .into_iter()
            .flat_map(|p| (1..=max_order).map(move |k| [p.clone(), vec![k]].concat()))
            .collect();
    }
    out
}

/// Index of the chosen fit: the lowest total order among fits whose error is
/// within the tie margin of the best, then the lower error.
fn pick(errors: &[(usize, &[u32], f64)], tol: f64) -> usize {
    let best = errors.iter().map(|e| e.2).fold(f64::INFINITY, f64::min);
    let limit = best * (1.0 + tol) + f64::EPSILON * best.abs().max(1e-300);
    errors
        .iter()
        .filter(|e| e.2 <= limit)
        .min_by(|a, b| {
            let ta: u32 = a.1.iter().sum();
            let tb: u32 = b.1.iter().sum();
            ta.cmp(&tb).then(a.2.total_cmp(&b.2)).then(a.1.cmp(b.1))
        })
        .map(|e| e.0)
        .expect("non-empty candidate list")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderChoice {
    pub orders: Vec<u32>,
    pub val_mae: f64,
}

/// One fit per order combination, then one selection per target.
fn grid_search(
    groups: &[usize],
    train_x: &[Vec<f64>],
    train_ys: &[&[f64]],
    val_x: &[Vec<f64>],
    val_ys: &[&[f64]],
    opts: &FitOptions,
) -> Result<(Design, Vec<ComboFit>, Vec<usize>), CalibrationError> {
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    let design = Design::new(groups, train_x, val_x, opts.scale_bounds);
    let (ty, vy) = (targets(train_ys), targets(val_ys));
    let fits: Vec<ComboFit> = order_grid(n_groups, opts.max_order.max(1))
        .iter()
        .filter_map(|o| fit_combo(&design, o, &ty, &vy, opts).ok())
        .collect();
    if fits.is_empty() {
        return Err(CalibrationError::NoFeasibleOrders);
    }
    let chosen = (0..train_ys.len())
        .map(|k| {
            let errs: Vec<(usize, &[u32], f64)> = fits
                .iter()
                .enumerate()
                .map(|(i, f)| (i, f.orders.as_slice(), f.val_mae[k]))
                .collect();
            errs[pick(&errs, opts.tie_tolerance)].0
        })
        .collect();
    Ok((design, fits, chosen))
}

/// Least-squares polynomial with fixed per-group orders.
pub fn fit_polynomial(
    x: &[Vec<f64>],
    y: &[f64],
    groups: &[usize],
    orders: &[u32],
    opts: &FitOptions,
) -> Result<MultiPolynomial, CalibrationError> {
    let design = Design::new(groups, x, &[], opts.scale_bounds);
    let fit = fit_combo(&design, orders, &targets(&[y]), &DMatrix::zeros(0, 1), opts)?;
    Ok(to_poly(&design, &fit, 0, opts))
}

fn to_poly(design: &Design, fit: &ComboFit, k: usize, opts: &FitOptions) -> MultiPolynomial {
    MultiPolynomial {
        orders: fit.orders.clone(),
        groups: design.groups.clone(),
        cross_terms: opts.cross_terms,
        scale: design.scale.clone(),
        exponents: fit.basis.clone(),
        coeffs: fit.coeffs.column(k).iter().copied().collect(),
    }
}

/// Orders minimizing validation MAE for one target.
pub fn select_orders(
    train_x: &[Vec<f64>],
    train_y: &[f64],
    val_x: &[Vec<f64>],
    val_y: &[f64],
    groups: &[usize],
    opts: &FitOptions,
) -> Result<OrderChoice, CalibrationError> {
    if val_x.is_empty() {
        return Err(CalibrationError::EmptySplit("validation"));
    }
    let (_, fits, chosen) = grid_search(groups, train_x, &[train_y], val_x, &[val_y], opts)?;
    let f = &fits[chosen[0]];
    Ok(OrderChoice {
        orders: f.orders.clone(),
        val_mae: f.val_mae[0],
    })
}

fn to_poly_1d(p: MultiPolynomial) -> Polynomial1D {
    let mut coeffs = vec![0.0; p.orders[0] as usize + 1];
    for (e, c) in p.exponents.iter().zip(&p.coeffs) {
        coeffs[e[0] as usize] = *c;
    }
    Polynomial1D {
        order: p.orders[0] as usize,
        coeffs,
        scale: p.scale[0],
    }
}

/// Univariate fit of a fixed order.
pub fn fit_polynomial_1d(x: &[f64], y: &[f64], order: u32, opts: &FitOptions) -> Result<Polynomial1D, CalibrationError> {
    let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
    // a single group never gets cross terms, and its cap is the order itself
    let opts = FitOptions { cross_terms: false, ..*opts };
    fit_polynomial(&rows, y, &[0], &[order], &opts).map(to_poly_1d)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Mae {
    #[serde(rename = "x3D")]
    pub x3d: f64,
    #[serde(rename = "Fx")]
    pub fx: f64,
    #[serde(rename = "Fy")]
    pub fy: f64,
    #[serde(rename = "Fz")]
    pub fz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub val_mae: Mae,
    pub created: String,
    pub train_records: usize,
    pub val_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub g1: Polynomial1D,
    pub gx: MultiPolynomial,
    pub gy: MultiPolynomial,
    pub gz: MultiPolynomial,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `(x3D, y3D, z3D)` in mm.
    pub location: [f64; 3],
    /// `(Fx, Fy, Fz)` in N.
    pub force: [f64; 3],
}

impl CalibrationModel {
    pub fn forces(&self, d: [f64; 3], x2d: f64, y2d: f64, dpf: f64) -> [f64; 3] {
        let x = [d[0], d[1], d[2], x2d, y2d, dpf];
        [self.gx.eval(&x), self.gy.eval(&x), self.gz.eval(&x)]
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| CalibrationError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibrationError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn fit_model(ds: &SplitDataset, opts: &FitOptions) -> Result<CalibrationModel, CalibrationError> {
    if ds.train.is_empty() {
        return Err(CalibrationError::EmptySplit("training"));
    }
    if ds.val.is_empty() {
        return Err(CalibrationError::EmptySplit("validation"));
    }
    let col = |rs: &[CalibrationRecord], f: fn(&CalibrationRecord) -> f64| rs.iter().map(f).collect::<Vec<f64>>();

    let (tx, vx) = (col(&ds.train, |r| r.x2d), col(&ds.val, |r| r.x2d));
    let tx: Vec<Vec<f64>> = tx.into_iter().map(|v| vec![v]).collect();
    let vx: Vec<Vec<f64>> = vx.into_iter().map(|v| vec![v]).collect();
    let (ty, vy) = (col(&ds.train, |r| r.x3d_mm), col(&ds.val, |r| r.x3d_mm));
    let g1_opts = FitOptions { cross_terms: false, ..*opts };
    let (design, fits, chosen) = grid_search(&[0], &tx, &[&ty], &vx, &[&vy], &g1_opts)?;
    let g1_fit = &fits[chosen[0]];
    let g1 = to_poly_1d(to_poly(&design, g1_fit, 0, &g1_opts));

    let tx: Vec<Vec<f64>> = ds.train.iter().map(|r| r.features().to_vec()).collect();
    let vx: Vec<Vec<f64>> = ds.val.iter().map(|r| r.features().to_vec()).collect();
    let ty = [col(&ds.train, |r| r.fx), col(&ds.train, |r| r.fy), col(&ds.train, |r| r.fz)];
    let vy = [col(&ds.val, |r| r.fx), col(&ds.val, |r| r.fy), col(&ds.val, |r| r.fz)];
    let (design, fits, chosen) = grid_search(
        &FORCE_GROUPS,
        &tx,
        &[&ty[0], &ty[1], &ty[2]],
        &vx,
        &[&vy[0], &vy[1], &vy[2]],
        opts,
    )?;
    let g = |k: usize| to_poly(&design, &fits[chosen[k]], k, opts);
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default();
    Ok(CalibrationModel {
        g1,
        gx: g(0),
        gy: g(1),
        gz: g(2),
        meta: ModelMeta {
            val_mae: Mae {
                x3d: g1_fit.val_mae[0],
                fx: fits[chosen[0]].val_mae[0],
                fy: fits[chosen[1]].val_mae[1],
                fz: fits[chosen[2]].val_mae[2],
            },
            created,
            train_records: ds.train.len(),
            val_records: ds.val.len(),
        },
    })
}

/// Location from `g1` and the arc, force from the three force maps.
pub fn predict(
    model: &CalibrationModel,
    geo: &SensorGeometry,
    x2d: f64,
    y2d: f64,
    d: [f64; 3],
    dpf: f64,
) -> Result<Prediction, GeometryError> {
    let location = crate::geometry::pixel_to_sensor_with(&model.g1, x2d, y2d, geo)?;
    Ok(Prediction {
        location,
        force: model.forces(d, x2d, y2d, dpf),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub overall: Mae,
    pub per_row: BTreeMap<u32, Mae>,
    pub count: usize,
}

/// Mean absolute errors from `(row, truth, prediction)` triples.
pub fn mae_report(items: &[(u32, [f64; 4], [f64; 4])]) -> MaeReport {
    fn mean(items: &[&(u32, [f64; 4], [f64; 4])]) -> Mae {
        let n = items.len().max(1) as f64;
        let m = |k: usize| items.iter().map(|(_, t, p)| (t[k] - p[k]).abs()).sum::<f64>() / n;
        Mae {
            x3d: m(0),
            fx: m(1),
            fy: m(2),
            fz: m(3),
        }
    }
    let all: Vec<_> = items.iter().collect();
    let mut rows: BTreeMap<u32, Vec<_>> = BTreeMap::new();
    for it in items {
        rows.entry(it.0).or_default().push(it);
    }
    MaeReport {
        overall: mean(&all),
        per_row: rows.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
        count: items.len(),
    }
}

pub fn evaluate(model: &CalibrationModel, geo: &SensorGeometry, test: &[CalibrationRecord]) -> Result<MaeReport, CalibrationError> {
    if test.is_empty() {
        return Err(CalibrationError::EmptySplit("test"));
    }
    let items = test
        .iter()
        .map(|r| {
            let p = predict(model, geo, r.x2d, r.y2d, [r.dx, r.dy, r.dz], r.dpf)?;
            Ok((
                r.row_id,
                [r.x3d_mm, r.fx, r.fy, r.fz],
                [p.location[0], p.force[0], p.force[1], p.force[2]],
            ))
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    Ok(mae_report(&items))
}
