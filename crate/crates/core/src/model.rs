//! Hyperbolic-elliptic model systems
//!
//! ```text
//! u_t + sum_j f_j(u)_{x_j} + L div q = 0
//! -grad div q + q + grad g(u) = 0
//! ```
//!
//! defined by small expression files, with closed-form or finite-difference
//! Jacobians and a symmetrizer `A0(u)`.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg::real_eig;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    ClosedForm,
    FiniteDifference,
}

/// One-parameter family of shock end states, expressions in `eps`.
#[derive(Debug, Clone)]
struct ShockFamily {
    u_minus: Vec<Expr>,
    u_plus: Vec<Expr>,
    s: Expr,
}

#[derive(Debug, Clone)]
pub struct ModelSystem {
    pub name: String,
    pub n: usize,
    pub d: usize,
    flux: Vec<Vec<Expr>>,
    dflux: Vec<Vec<Vec<Expr>>>,
    g: Expr,
    dg: Vec<Expr>,
    pub l: DVector<f64>,
    a0: Vec<Vec<Expr>>,
    pub jacobian_mode: JacobianMode,
    pub domain: Vec<(f64, f64)>,
    /// Frame speed subtracted from f_1.
    pub speed: f64,
    shock: Option<ShockFamily>,
}

/// All model quantities at one state.
#[derive(Debug, Clone)]
pub struct ModelEval {
    pub f: Vec<DVector<f64>>,
    pub g: f64,
    pub df: Vec<DMatrix<f64>>,
    pub dg: DVector<f64>,
    pub a0: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockData {
    pub u_minus: Vec<f64>,
    pub u_plus: Vec<f64>,
    pub s: f64,
    pub p: usize,
    pub amplitude: f64,
}

const HAMER: &str = include_str!("../data/hamer2d.toml");
const COUPLED: &str = include_str!("../data/coupled2x2.toml");

pub fn builtin_model(name: &str) -> Result<ModelSystem> {
    match name {
        "hamer2d" => ModelSystem::from_toml(HAMER),
        "coupled2x2" => ModelSystem::from_toml(COUPLED),
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

/// Built-in name or path to a model file.
pub fn load_model(spec: &str) -> Result<ModelSystem> {
    match builtin_model(spec) {
        Ok(m) => Ok(m),
        Err(Error::UnknownModel(_)) if std::path::Path::new(spec).exists() => {
            let src = std::fs::read_to_string(spec).map_err(|e| Error::InvalidInput(e.to_string()))?;
            ModelSystem::from_toml(&src)
        }
        Err(e) => Err(e),
    }
}

fn var_names(n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("u{k}")).collect()
}

fn expr_list(v: &toml::Value, vars: &[&str], what: &str) -> Result<Vec<Expr>> {
    let arr = v.as_array().ok_or_else(|| Error::Parse(format!("`{what}` must be an array")))?;
    arr.iter()
        .map(|e| match e {
            toml::Value::String(s) => Expr::parse(s, vars),
            toml::Value::Float(f) => Ok(Expr::Const(*f)),
            toml::Value::Integer(i) => Ok(Expr::Const(*i as f64)),
            _ => Err(Error::Parse(format!("bad entry in `{what}`"))),
        })
        .collect()
}

fn number(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn builtin_flux(tag: &str, n: usize, vars: &[&str]) -> Result<Vec<Expr>> {
    match tag {
        "burgers" => (0..n).map(|k| Expr::parse(&format!("{}^2/2", vars[k]), vars)).collect(),
        "zero" => Ok(vec![Expr::Const(0.0); n]),
        other => Err(Error::Parse(format!("unknown builtin flux tag `{other}`"))),
    }
}

impl ModelSystem {
    pub fn from_toml(src: &str) -> Result<ModelSystem> {
        let t: toml::Table = src.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let get = |k: &str| t.get(k).ok_or_else(|| Error::Parse(format!("missing key `{k}`")));
        let name = get("name")?.as_str().ok_or_else(|| Error::Parse("`name` must be a string".into()))?.to_string();
        let n = get("n")?.as_integer().ok_or_else(|| Error::Parse("`n` must be an integer".into()))? as usize;
        let d = get("d")?.as_integer().ok_or_else(|| Error::Parse("`d` must be an integer".into()))? as usize;
        if n < 1 || !(2..=3).contains(&d) {
            return Err(Error::InvalidInput(format!("need n >= 1 and d in {{2, 3}}, got n={n}, d={d}")));
        }
        let names = var_names(n);
        let vars: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let mut flux = Vec::with_capacity(d);
        for j in 1..=d {
            let key = format!("flux_{j}");
            let v = get(&key)?;
            let fj = match v {
                toml::Value::String(tag) => builtin_flux(tag, n, &vars)?,
                _ => expr_list(v, &vars, &key)?,
            };
            if fj.len() != n {
                return Err(Error::Parse(format!("`{key}` needs {n} components")));
            }
            flux.push(fj);
        }
        let g = Expr::parse(get("g")?.as_str().ok_or_else(|| Error::Parse("`g` must be a string".into()))?, &vars)?;
        let l: Vec<f64> = get("L")?
            .as_array()
            .ok_or_else(|| Error::Parse("`L` must be an array".into()))?
            .iter()
            .map(|v| number(v).ok_or_else(|| Error::Parse("`L` entries must be numbers".into())))
            .collect::<Result<_>>()?;
        if l.len() != n {
            return Err(Error::Parse(format!("`L` needs {n} entries")));
        }
        let a0_rows = get("A0")?.as_array().ok_or_else(|| Error::Parse("`A0` must be an array".into()))?;
        if a0_rows.len() != n {
            return Err(Error::Parse(format!("`A0` needs {n} rows")));
        }
        let a0 = a0_rows
            .iter()
            .map(|r| {
                let row = expr_list(r, &vars, "A0")?;
                if row.len() != n {
                    return Err(Error::Parse(format!("`A0` rows need {n} entries")));
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        let boxv = get("domain_box")?.as_array().ok_or_else(|| Error::Parse("`domain_box` must be an array".into()))?;
        if boxv.len() != n {
            return Err(Error::Parse(format!("`domain_box` needs {n} intervals")));
        }
        let domain = boxv
            .iter()
            .map(|iv| {
                let a = iv.as_array().filter(|a| a.len() == 2).ok_or_else(|| Error::Parse("interval must be [lo, hi]".into()))?;
                match (number(&a[0]), number(&a[1])) {
                    (Some(lo), Some(hi)) if lo < hi => Ok((lo, hi)),
                    _ => Err(Error::Parse("interval must satisfy lo < hi".into())),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let jacobian_mode = match t.get("jacobian_mode").and_then(|v| v.as_str()) {
            None | Some("closed_form") => JacobianMode::ClosedForm,
            Some("finite_difference") => JacobianMode::FiniteDifference,
            Some(other) => return Err(Error::Parse(format!("unknown jacobian_mode `{other}`"))),
        };
        let shock = match t.get("shock") {
            None => None,
            Some(sv) => {
                let st = sv.as_table().ok_or_else(|| Error::Parse("`shock` must be a table".into()))?;
                let mut svars = vars.clone();
                svars.push("eps");
                let sget = |k: &str| st.get(k).ok_or_else(|| Error::Parse(format!("missing key `shock.{k}`")));
                let u_minus = expr_list(sget("u_minus")?, &svars, "shock.u_minus")?;
                let u_plus = expr_list(sget("u_plus")?, &svars, "shock.u_plus")?;
                if u_minus.len() != n || u_plus.len() != n {
                    return Err(Error::Parse("shock states need n components".into()));
                }
                let s = match sget("s")? {
                    toml::Value::String(s) => Expr::parse(s, &svars)?,
                    v => Expr::Const(number(v).ok_or_else(|| Error::Parse("`shock.s` must be a number".into()))?),
                };
                Some(ShockFamily { u_minus, u_plus, s })
            }
        };
        let dflux = flux.iter().map(|fj| fj.iter().map(|fi| (0..n).map(|k| fi.diff(k)).collect()).collect()).collect();
        let dg = (0..n).map(|k| g.diff(k)).collect();
        Ok(ModelSystem {
            name,
            n,
            d,
            flux,
            dflux,
            g,
            dg,
            l: DVector::from_vec(l),
            a0,
            jacobian_mode,
            domain,
            speed: 0.0,
            shock,
        })
    }

    /// Copy of the model in the frame moving with speed `s` (f_1 <- f_1 - s u).
    pub fn in_frame(&self, s: f64) -> ModelSystem {
        let mut m = self.clone();
        m.speed = s;
        m
    }

    pub fn in_domain(&self, u: &[f64]) -> bool {
        u.iter().zip(&self.domain).all(|(v, (lo, hi))| v > lo && v < hi)
    }

    /// Flux f_j(u), j zero-based.
    pub fn flux(&self, j: usize, u: &[f64]) -> DVector<f64> {
        let mut out = DVector::from_iterator(self.n, self.flux[j].iter().map(|e| e.eval(u)));
        if j == 0 && self.speed != 0.0 {
            for k in 0..self.n {
                out[k] -= self.speed * u[k];
            }
        }
        out
    }

    pub fn g(&self, u: &[f64]) -> f64 {
        self.g.eval(u)
    }

    fn fd_step(u: &[f64]) -> f64 {
        let nrm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        1e-6 * nrm.max(1.0)
    }

    pub fn jac_closed(&self, j: usize, u: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::from_fn(n, n, |i, k| self.dflux[j][i][k].eval(u));
        if j == 0 && self.speed != 0.0 {
            for k in 0..n {
                m[(k, k)] -= self.speed;
            }
        }
        m
    }

    pub fn jac_fd(&self, j: usize, u: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let h = Self::fd_step(u);
        let mut m = DMatrix::zeros(n, n);
        let mut up = u.to_vec();
        for k in 0..n {
            up[k] = u[k] + h;
            let fp = self.flux(j, &up);
            up[k] = u[k] - h;
            let fm = self.flux(j, &up);
            up[k] = u[k];
            m.set_column(k, &((fp - fm) / (2.0 * h)));
        }
        m
    }

    /// df_j(u) in the model's Jacobian mode.
    pub fn jac(&self, j: usize, u: &[f64]) -> DMatrix<f64> {
        match self.jacobian_mode {
            JacobianMode::ClosedForm => self.jac_closed(j, u),
            JacobianMode::FiniteDifference => self.jac_fd(j, u),
        }
    }

    pub fn dg_closed(&self, u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.n, self.dg.iter().map(|e| e.eval(u)))
    }

    pub fn dg_fd(&self, u: &[f64]) -> DVector<f64> {
        let h = Self::fd_step(u);
        let mut up = u.to_vec();
        DVector::from_fn(self.n, |k, _| {
            up[k] = u[k] + h;
            let gp = self.g(&up);
            up[k] = u[k] - h;
            let gm = self.g(&up);
            up[k] = u[k];
            (gp - gm) / (2.0 * h)
        })
    }

    pub fn dg(&self, u: &[f64]) -> DVector<f64> {
        match self.jacobian_mode {
            JacobianMode::ClosedForm => self.dg_closed(u),
            JacobianMode::FiniteDifference => self.dg_fd(u),
        }
    }

    pub fn a0(&self, u: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, k| self.a0[i][k].eval(u))
    }

    /// A_xi = sum_j xi_j df_j(u).
    pub fn symbol(&self, xi: &[f64], u: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (j, x) in xi.iter().enumerate() {
            if *x != 0.0 {
                m += self.jac(j, u) * *x;
            }
        }
        m
    }

    /// Transverse symbol sum_{j>1} xi_j df_j(u) for xi_t = (xi_2, ..., xi_d).
    pub fn transverse_symbol(&self, xi_t: &[f64], u: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (j, x) in xi_t.iter().enumerate() {
            if *x != 0.0 {
                m += self.jac(j + 1, u) * *x;
            }
        }
        m
    }

    /// End states for strength parameter `eps` from the model's shock family.
    pub fn shock_states(&self, eps: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let fam = self
            .shock
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("model `{}` declares no shock family", self.name)))?;
        let mut x = vec![0.0; self.n];
        x.push(eps);
        let um = fam.u_minus.iter().map(|e| e.eval(&x)).collect();
        let up = fam.u_plus.iter().map(|e| e.eval(&x)).collect();
        Ok((um, up, fam.s.eval(&x)))
    }
}

/// Evaluates fluxes, Jacobians, g, dg and A0 at `u` with domain and finiteness guards.
pub fn eval_model(model: &ModelSystem, u: &[f64]) -> Result<ModelEval> {
    if u.len() != model.n {
        return Err(Error::InvalidInput(format!("state has {} components, model needs {}", u.len(), model.n)));
    }
    if !model.in_domain(u) {
        return Err(Error::OutOfDomain(u.to_vec()));
    }
    let ev = ModelEval {
        f: (0..model.d).map(|j| model.flux(j, u)).collect(),
        g: model.g(u),
        df: (0..model.d).map(|j| model.jac(j, u)).collect(),
        dg: model.dg(u),
        a0: model.a0(u),
    };
    let finite = ev.f.iter().all(|v| v.iter().all(|x| x.is_finite()))
        && ev.g.is_finite()
        && ev.df.iter().all(|m| m.iter().all(|x| x.is_finite()))
        && ev.dg.iter().all(|x| x.is_finite())
        && ev.a0.iter().all(|x| x.is_finite());
    if !finite {
        return Err(Error::NonFinite(format!("model `{}` at {u:?}", model.name)));
    }
    Ok(ev)
}

/// Lax index p of (u-, u+, s), `None` when no unique index exists.
pub fn lax_index(model: &ModelSystem, u_minus: &[f64], u_plus: &[f64], s: f64) -> Result<Option<usize>> {
    let (lm, _, _) = real_eig(&model.jac(0, u_minus))?;
    let (lp, _, _) = real_eig(&model.jac(0, u_plus))?;
    let n = model.n;
    let mut found = Vec::new();
    for p in 1..=n {
        let k = p - 1;
        let mut ok = lp[k] < s && s < lm[k];
        if p > 1 {
            ok &= lm[k - 1] < s;
        }
        if p < n {
            ok &= s < lp[k + 1];
        }
        if ok {
            found.push(p);
        }
    }
    Ok(if found.len() == 1 { Some(found[0]) } else { None })
}

impl ShockData {
    /// Shock of strength `eps` from the model family; `p` from the Lax inequalities.
    pub fn from_eps(model: &ModelSystem, eps: f64) -> Result<ShockData> {
        let (um, up, s) = model.shock_states(eps)?;
        ShockData::new(model, um, up, s)
    }

    pub fn new(model: &ModelSystem, u_minus: Vec<f64>, u_plus: Vec<f64>, s: f64) -> Result<ShockData> {
        let amplitude = u_minus.iter().zip(&u_plus).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let p = lax_index(model, &u_minus, &u_plus, s)?
            .ok_or_else(|| Error::InvalidInput("end states satisfy no unique Lax index".into()))?;
        Ok(ShockData { u_minus, u_plus, s, p, amplitude })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamer_values() {
        let m = builtin_model("hamer2d").unwrap();
        assert_eq!((m.n, m.d), (1, 2));
        let ev = eval_model(&m, &[0.2]).unwrap();
        assert!((ev.f[0][0] - 0.02).abs() < 1e-15);
        assert!((ev.df[0][(0, 0)] - 0.2).abs() < 1e-15);
        assert!((ev.dg[0] - 1.0).abs() < 1e-15);
        assert!((ev.a0[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_domain() {
        let m = builtin_model("hamer2d").unwrap();
        assert!(matches!(eval_model(&m, &[2.5]), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn unknown_model() {
        assert!(matches!(builtin_model("bogus"), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn coupled_shape_and_shock() {
        let m = builtin_model("coupled2x2").unwrap();
        assert_eq!((m.n, m.d), (2, 2));
        let sh = ShockData::from_eps(&m, 0.1).unwrap();
        assert_eq!(sh.p, 1);
        let r = m.flux(0, &sh.u_plus) - m.flux(0, &sh.u_minus);
        assert!(r.norm() < 1e-14);
    }

    #[test]
    fn hamer_shock_family() {
        let m = builtin_model("hamer2d").unwrap();
        let sh = ShockData::from_eps(&m, 0.1).unwrap();
        assert_eq!(sh.u_minus, vec![0.1]);
        assert_eq!(sh.u_plus, vec![-0.1]);
        assert_eq!(sh.p, 1);
        assert!((sh.amplitude - 0.2).abs() < 1e-15);
    }

    #[test]
    fn moving_frame_shifts_flux() {
        let m = builtin_model("hamer2d").unwrap().in_frame(0.25);
        assert!((m.flux(0, &[1.0])[0] - 0.25).abs() < 1e-15);
        assert!((m.jac(0, &[1.0])[(0, 0)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn builtin_flux_tag() {
        let src = "name='t'\nn=1\nd=2\nflux_1='burgers'\nflux_2='zero'\ng='u1'\nL=[1]\nA0=[['1']]\ndomain_box=[[-1,1]]\n";
        let m = ModelSystem::from_toml(src).unwrap();
        assert!((m.flux(0, &[0.4])[0] - 0.08).abs() < 1e-15);
        assert_eq!(m.flux(1, &[0.4])[0], 0.0);
    }

    #[test]
    fn finite_difference_mode() {
        let src = HAMER.replace("closed_form", "finite_difference");
        let m = ModelSystem::from_toml(&src).unwrap();
        assert_eq!(m.jacobian_mode, JacobianMode::FiniteDifference);
        assert!((m.jac(0, &[0.3])[(0, 0)] - 0.3).abs() < 1e-9);
    }
}
