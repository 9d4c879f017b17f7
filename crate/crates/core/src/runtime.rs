//! Built-in linear model: ridge-regularised least squares, prediction, and
//! proximal warm-start tuning.
//!
//! Both fitting and tuning solve a normal system `A β = b` where β is
//! `[intercept, coef₀, …]`:
//!
//! * fit:  `A = XᵀX + λ·D`,        `b = Xᵀy`
//! * tune: `A = XᵀX + λ·D + τ·I`,  `b = Xᵀy + τ·β_base`
//!
//! with `D = diag(0, 1, …, 1)` (intercept unpenalised by λ). `XᵀX` and `Xᵀy`
//! are accumulated row by row in row order, the penalty is added to the
//! diagonal afterwards, and the system is solved by an unpivoted Cholesky
//! factorisation in natural column order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prng::split_rows;
use crate::table::{put_str, Reader, Table};

pub const MODEL_MAGIC: &[u8; 4] = b"MFLM";
pub const MODEL_FORMAT_VERSION: u16 = 1;

/// Relative pivot threshold below which the normal matrix is treated as singular.
const PIVOT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub target: String,
    pub features: Vec<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub train_residual_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams {
    pub ridge: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            ridge: 0.0,
            seed: 0,
            train_fraction: 1.0,
        }
    }
}

pub fn fit(table: &Table, features: &[String], target: &str, params: &FitParams) -> Result<LinearModel> {
    if !(params.ridge >= 0.0 && params.ridge.is_finite()) {
        return Err(Error::validation("ridge penalty must be finite and >= 0"));
    }
    if !(params.train_fraction > 0.0 && params.train_fraction <= 1.0) {
        return Err(Error::validation("train_fraction must lie in (0, 1]"));
    }
    let data = Design::from_table(table, features, target)?;
    let rows = split_rows(data.rows(), params.train_fraction, params.seed).train;
    let (mut a, b) = data.normal_equations(&rows)?;
    let p = data.columns.len() + 1;
    for i in 1..p {
        a[i * p + i] += params.ridge;
    }
    let beta = cholesky_solve(a, b, p).map_err(|e| singular_hint(e, params.ridge == 0.0))?;
    data.finish(features, target, beta, &rows)
}

pub fn tune(base: &LinearModel, table: &Table, ridge: f64, shrink: f64) -> Result<LinearModel> {
    if !(ridge >= 0.0 && ridge.is_finite()) || !(shrink >= 0.0 && shrink.is_finite()) {
        return Err(Error::validation("ridge and shrink must be finite and >= 0"));
    }
    let data = Design::from_table(table, &base.features, &base.target)?;
    let rows: Vec<usize> = (0..data.rows()).collect();
    let (mut a, mut b) = data.normal_equations(&rows)?;
    let p = data.columns.len() + 1;
    for i in 1..p {
        a[i * p + i] += ridge;
    }
    let prior: Vec<f64> = std::iter::once(base.intercept)
        .chain(base.coefficients.iter().copied())
        .collect();
    for i in 0..p {
        a[i * p + i] += shrink;
        b[i] += shrink * prior[i];
    }
    let beta = cholesky_solve(a, b, p).map_err(|e| singular_hint(e, ridge == 0.0 && shrink == 0.0))?;
    data.finish(&base.features, &base.target, beta, &rows)
}

fn singular_hint(e: Error, unpenalised: bool) -> Error {
    match e {
        Error::Singular(msg) if unpenalised => {
            Error::Singular(format!("{msg}; use a ridge penalty > 0"))
        }
        e => e,
    }
}

/// Feature and target columns pulled out of a table.
struct Design<'a> {
    columns: Vec<&'a [f64]>,
    target: &'a [f64],
}

impl<'a> Design<'a> {
    fn from_table(table: &'a Table, features: &[String], target: &str) -> Result<Self> {
        let mut names: Vec<&str> = features.iter().map(String::as_str).collect();
        names.push(target);
        let mut cols = table.float_columns(&names)?;
        let target = cols.pop().expect("target column");
        for (name, col) in names.iter().zip(cols.iter().chain([&target])) {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("column {name} has non-finite values")));
            }
        }
        Ok(Self { columns: cols, target })
    }

    fn rows(&self) -> usize {
        self.target.len()
    }

    fn row(&self, r: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.push(1.0);
        buf.extend(self.columns.iter().map(|c| c[r]));
    }

    fn normal_equations(&self, rows: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.columns.len() + 1;
        if rows.len() < p {
            return Err(Error::validation(format!(
                "insufficient rows: {} training rows for {} parameters",
                rows.len(),
                p
            )));
        }
        let mut a = vec![0.0; p * p];
        let mut b = vec![0.0; p];
        let mut x = Vec::with_capacity(p);
        for &r in rows {
            self.row(r, &mut x);
            let y = self.target[r];
            for i in 0..p {
                for j in i..p {
                    a[i * p + j] += x[i] * x[j];
                }
                b[i] += x[i] * y;
            }
        }
        for i in 0..p {
            for j in 0..i {
                a[i * p + j] = a[j * p + i];
            }
        }
        Ok((a, b))
    }

    fn finish(&self, features: &[String], target: &str, beta: Vec<f64>, rows: &[usize]) -> Result<LinearModel> {
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("solution has non-finite coefficients"));
        }
        let mut model = LinearModel {
            target: target.to_string(),
            features: features.to_vec(),
            intercept: beta[0],
            coefficients: beta[1..].to_vec(),
            train_residual_std: 0.0,
        };
        let mut x = Vec::new();
        let residuals: Vec<f64> = rows
            .iter()
            .map(|&r| {
                self.row(r, &mut x);
                self.target[r] - model.predict_row(&x[1..])
            })
            .collect();
        model.train_residual_std = sample_std(&residuals);
        Ok(model)
    }
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    (ss / (n - 1) as f64).sqrt()
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, p×p).
pub(crate) fn cholesky_solve(a: Vec<f64>, b: Vec<f64>, p: usize) -> Result<Vec<f64>> {
    let max_diag = (0..p).map(|i| a[i * p + i].abs()).fold(0.0, f64::max);
    let tol = PIVOT_TOLERANCE * max_diag.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(d > tol) {
            return Err(Error::Singular(format!(
                "pivot {j} is {d:e} (tolerance {tol:e}); columns are collinear"
            )));
        }
        let djj = d.sqrt();
        l[j * p + j] = djj;
        for i in (j + 1)..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / djj;
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * p + k] * z[k];
        }
        z[i] = s / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in (i + 1)..p {
            s -= l[k * p + i] * x[k];
        }
        x[i] = s / l[i * p + i];
    }
    Ok(x)
}

impl LinearModel {
    /// `((intercept + c₀x₀) + c₁x₁) + …`, values in feature order.
    pub fn predict_row(&self, values: &[f64]) -> f64 {
        let mut y = self.intercept;
        for (c, x) in self.coefficients.iter().zip(values) {
            y += c * x;
        }
        y
    }

    pub fn predict_named(&self, values: &BTreeMap<String, f64>) -> Result<f64> {
        let mut row = Vec::with_capacity(self.features.len());
        for f in &self.features {
            match values.get(f) {
                Some(v) => row.push(*v),
                None => return Err(Error::missing_columns(vec![f.clone()])),
            }
        }
        let y = self.predict_row(&row);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::validation("prediction is not finite"))
        }
    }

    pub fn predict_table(&self, table: &Table) -> Result<Vec<f64>> {
        let names: Vec<&str> = self.features.iter().map(String::as_str).collect();
        let cols = table.float_columns(&names)?;
        let mut row = vec![0.0; cols.len()];
        let mut out = Vec::with_capacity(table.row_count());
        for r in 0..table.row_count() {
            for (slot, c) in row.iter_mut().zip(&cols) {
                *slot = c[r];
            }
            out.push(self.predict_row(&row));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.len() != self.features.len() {
            return Err(Error::validation("coefficient count differs from feature count"));
        }
        let all_finite = self.coefficients.iter().all(|c| c.is_finite())
            && self.intercept.is_finite()
            && self.train_residual_std.is_finite();
        if !all_finite || self.train_residual_std < 0.0 {
            return Err(Error::validation("model parameters must be finite"));
        }
        Ok(())
    }

    /// Serialises to the `MFLM` layout:
    ///
    /// ```text
    /// "MFLM" | version: u16 LE | target: (u32 LE len, UTF-8)
    /// | feature_count: u32 LE | feature_count × (u32 LE len, UTF-8)
    /// | feature_count × f64 LE coefficients | intercept: f64 LE
    /// | train_residual_std: f64 LE
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.target);
        out.extend_from_slice(&(self.features.len() as u32).to_le_bytes());
        for f in &self.features {
            put_str(&mut out, f);
        }
        for c in &self.coefficients {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.intercept.to_le_bytes());
        out.extend_from_slice(&self.train_residual_std.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if bytes.len() < 4 || r.take(4)? != MODEL_MAGIC {
            return Err(Error::Unsupported("artifact is not an MFLM linear model".into()));
        }
        let version = r.u16()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Unsupported(format!("MFLM format version {version}")));
        }
        let target = r.string()?;
        let n = r.u32()? as usize;
        let mut features = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            features.push(r.string()?);
        }
        let mut coefficients = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            coefficients.push(r.f64()?);
        }
        let intercept = r.f64()?;
        let train_residual_std = r.f64()?;
        if !r.is_empty() {
            return Err(Error::corruption("trailing bytes after MFLM model"));
        }
        let model = Self {
            target,
            features,
            coefficients,
            intercept,
            train_residual_std,
        };
        model.validate().map_err(|e| Error::corruption(e.to_string()))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::XorShift64Star;
    use crate::table::Column;
    use proptest::prelude::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn table(cols: Vec<(&str, Vec<f64>)>) -> Table {
        Table::new(cols.into_iter().map(|(n, v)| Column::float(n, v)).collect()).unwrap()
    }

    #[test]
    fn exact_line() {
        let t = table(vec![("x", vec![0.0, 1.0, 2.0]), ("y", vec![1.0, 3.0, 5.0])]);
        let m = fit(&t, &names(&["x"]), "y", &FitParams::default()).unwrap();
        assert!((m.intercept - 1.0).abs() < 1e-9);
        assert!((m.coefficients[0] - 2.0).abs() < 1e-9);
        assert!(m.train_residual_std < 1e-9);
    }

    #[test]
    fn duplicate_columns_are_singular() {
        let t = table(vec![
            ("a", vec![0.0, 1.0, 2.0, 3.0]),
            ("b", vec![0.0, 1.0, 2.0, 3.0]),
            ("y", vec![1.0, 2.0, 2.0, 5.0]),
        ]);
        let err = fit(&t, &names(&["a", "b"]), "y", &FitParams::default()).unwrap_err();
        match err {
            Error::Singular(msg) => assert!(msg.contains("ridge penalty > 0"), "{msg}"),
            e => panic!("{e:?}"),
        }
        let ridge = FitParams { ridge: 0.5, ..FitParams::default() };
        assert!(fit(&t, &names(&["a", "b"]), "y", &ridge).is_ok());
    }

    #[test]
    fn insufficient_rows_and_bad_inputs() {
        let t = table(vec![("x", vec![1.0]), ("y", vec![2.0])]);
        assert!(matches!(
            fit(&t, &names(&["x"]), "y", &FitParams::default()),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            fit(&t, &names(&["zz"]), "y", &FitParams::default()),
            Err(Error::Schema { .. })
        ));
        let bad = FitParams { train_fraction: 0.0, ..FitParams::default() };
        assert!(fit(&t, &names(&["x"]), "y", &bad).is_err());
    }

    fn ridge_instance() -> Table {
        // Same generator as tests/oracles/derive_values.py::ridge_instance.
        let mut rng = XorShift64Star::new(2024);
        let mut cols = vec![Vec::new(); 4];
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            let noise = 0.1 * (rng.next_f64() - 0.5);
            let y = 1.5 + 0.8 * x[0] - 2.0 * x[1] + 0.3 * x[2] + noise;
            for j in 0..3 {
                cols[j].push(x[j]);
            }
            cols[3].push(y);
        }
        let mut it = cols.into_iter();
        table(vec![
            ("x0", it.next().unwrap()),
            ("x1", it.next().unwrap()),
            ("x2", it.next().unwrap()),
            ("y", it.next().unwrap()),
        ])
    }

    #[test]
    fn ridge_matches_frozen_oracle() {
        let t = ridge_instance();
        let p = FitParams { ridge: 0.1, ..FitParams::default() };
        let m = fit(&t, &names(&["x0", "x1", "x2"]), "y", &p).unwrap();
        let expected = [
            1.4983335001888316,
            0.7957134959236936,
            -1.994251613945354,
            0.29724879425048734,
        ];
        let got = [m.intercept, m.coefficients[0], m.coefficients[1], m.coefficients[2]];
        for (g, e) in got.iter().zip(expected) {
            assert!(((g - e) / e).abs() < 1e-8, "{g} vs {e}");
        }
    }

    #[test]
    fn tune_matches_frozen_oracle() {
        let mut rng = XorShift64Star::new(99);
        let (mut x0, mut x1, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..12 {
            let a = 2.0 * rng.next_f64() - 1.0;
            let b = 2.0 * rng.next_f64() - 1.0;
            let noise = 0.05 * (rng.next_f64() - 0.5);
            x0.push(a);
            x1.push(b);
            y.push(2.0 - a + 3.0 * b + noise);
        }
        let t = table(vec![("x0", x0), ("x1", x1), ("y", y)]);
        let base = LinearModel {
            target: "y".into(),
            features: names(&["x0", "x1"]),
            coefficients: vec![1.0, -1.0],
            intercept: 0.5,
            train_residual_std: 0.0,
        };
        let m = tune(&base, &t, 0.2, 1.0).unwrap();
        let expected = [2.0856629306420555, -0.24084072894866818, 2.052604312729815];
        let got = [m.intercept, m.coefficients[0], m.coefficients[1]];
        for (g, e) in got.iter().zip(expected) {
            assert!(((g - e) / e).abs() < 1e-8, "{g} vs {e}");
        }
    }

    #[test]
    fn tune_limits() {
        let t = ridge_instance();
        let base = LinearModel {
            target: "y".into(),
            features: names(&["x0", "x1", "x2"]),
            coefficients: vec![3.0, 4.0, -5.0],
            intercept: 0.25,
            train_residual_std: 0.0,
        };
        let pinned = tune(&base, &t, 0.0, 1e12).unwrap();
        for (g, e) in pinned.coefficients.iter().zip(&base.coefficients) {
            assert!(((g - e) / e).abs() < 1e-6);
        }
        assert!(((pinned.intercept - 0.25) / 0.25).abs() < 1e-6);

        let exact = table(vec![("x", vec![0.0, 1.0, 2.0, 3.0]), ("y", vec![1.0, 3.0, 5.0, 7.0])]);
        let b = LinearModel {
            target: "y".into(),
            features: names(&["x"]),
            coefficients: vec![-9.0],
            intercept: 4.0,
            train_residual_std: 0.0,
        };
        let free = tune(&b, &exact, 0.0, 0.0).unwrap();
        assert!((free.coefficients[0] - 2.0).abs() < 1e-9);
        assert!((free.intercept - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tune_without_shrink_equals_fit() {
        let t = ridge_instance();
        let feats = names(&["x0", "x1", "x2"]);
        for ridge in [0.0, 0.1, 3.0] {
            let fitted = fit(&t, &feats, "y", &FitParams { ridge, ..FitParams::default() }).unwrap();
            let base = LinearModel { coefficients: vec![9.0; 3], intercept: -4.0, ..fitted.clone() };
            let tuned = tune(&base, &t, ridge, 0.0).unwrap();
            assert_eq!(tuned.to_bytes(), fitted.to_bytes());
        }
    }

    #[test]
    fn ols_is_locally_optimal() {
        let t = ridge_instance();
        let feats = names(&["x0", "x1", "x2"]);
        let m = fit(&t, &feats, "y", &FitParams::default()).unwrap();
        let y = t.float_columns(&["y"]).unwrap()[0].to_vec();
        let sse = |m: &LinearModel| -> f64 {
            m.predict_table(&t).unwrap().iter().zip(&y).map(|(p, y)| (y - p).powi(2)).sum()
        };
        let base = sse(&m);
        for k in 0..4 {
            for step in [1e-3, -1e-3] {
                let mut p = m.clone();
                if k == 0 {
                    p.intercept += step;
                } else {
                    p.coefficients[k - 1] += step;
                }
                assert!(sse(&p) >= base);
            }
        }
    }

    #[test]
    fn predictions() {
        let m = LinearModel {
            target: "y".into(),
            features: names(&["x"]),
            coefficients: vec![2.0],
            intercept: 1.0,
            train_residual_std: 0.0,
        };
        assert_eq!(m.predict_row(&[2.0]), 5.0);
        let zero = LinearModel { coefficients: vec![0.0], intercept: 0.0, ..m.clone() };
        assert_eq!(zero.predict_row(&[123.0]), 0.0);
        let t = table(vec![("x", vec![3.0, 0.0, 1.0])]);
        assert_eq!(m.predict_table(&t).unwrap(), vec![7.0, 1.0, 3.0]);
        let err = m.predict_named(&BTreeMap::from([("z".to_string(), 1.0)])).unwrap_err();
        assert!(matches!(err, Error::Schema { ref columns, .. } if columns == &["x"]));
    }

    #[test]
    fn serialization_round_trip_and_rejects() {
        let m = fit(&ridge_instance(), &names(&["x0", "x1", "x2"]), "y", &FitParams::default()).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"MFLM");
        assert_eq!(LinearModel::from_bytes(&bytes).unwrap(), m);
        assert!(matches!(LinearModel::from_bytes(b"PK\x03\x04"), Err(Error::Unsupported(_))));
        assert!(LinearModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(LinearModel::from_bytes(&v2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn fit_is_deterministic_under_split() {
        let t = ridge_instance();
        let feats = names(&["x0", "x1", "x2"]);
        let p = FitParams { ridge: 0.0, seed: 77, train_fraction: 0.6 };
        let a = fit(&t, &feats, "y", &p).unwrap().to_bytes();
        let b = fit(&t, &feats, "y", &p).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = fit(&t, &feats, "y", &FitParams { seed: 78, ..p }).unwrap().to_bytes();
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn predict_is_affine(
            coefs in proptest::collection::vec(-10.0f64..10.0, 3),
            intercept in -10.0f64..10.0,
            x1 in proptest::collection::vec(-10.0f64..10.0, 3),
            x2 in proptest::collection::vec(-10.0f64..10.0, 3),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let m = LinearModel {
                target: "y".into(),
                features: names(&["a", "b", "c"]),
                coefficients: coefs,
                intercept,
                train_residual_std: 0.0,
            };
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
            let lhs = m.predict_row(&mix);
            let rhs = a * m.predict_row(&x1) + b * m.predict_row(&x2) - (a + b - 1.0) * intercept;
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()).max(100.0) );
        }
    }
}
