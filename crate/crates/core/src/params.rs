//! Model constants, the `.params` text format, and the voltage/day split of
//! the Faraday constant.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: f64 = 86400.0;

macro_rules! parameters {
    ($( $variant:ident, $field:ident, $key:literal, $default:expr, $unit:literal; )*) => {
        /// Identifier for every entry of [`ParameterSet`].
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(into = "String", try_from = "String")]
        pub enum ParamId {
            $( $variant, )*
        }

        impl ParamId {
            pub const ALL: &'static [ParamId] = &[ $( ParamId::$variant, )* ];

            /// Key used in parameter files and output headers.
            pub fn key(self) -> &'static str {
                match self { $( ParamId::$variant => $key, )* }
            }

            pub fn unit(self) -> &'static str {
                match self { $( ParamId::$variant => $unit, )* }
            }
        }

        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct ParameterSet {
            $( pub $field: f64, )*
        }

        impl ParameterSet {
            /// Reference values with the expression entries resolved
            /// (M_total = 0.05 X_max2, K_M = 0.2 M_total).
            pub fn reference() -> Self {
                let mut p = ParameterSet { $( $field: $default, )* };
                p.m_total = 0.05 * p.x_max2;
                p.k_m = 0.2 * p.m_total;
                p
            }

            pub fn get(&self, id: ParamId) -> f64 {
                match id { $( ParamId::$variant => self.$field, )* }
            }

            pub fn set(&mut self, id: ParamId, value: f64) {
                match id { $( ParamId::$variant => self.$field = value, )* }
            }
        }
    };
}

parameters! {
    D,        d,        "D",         0.0,      "1/day";
    S0,       s0,       "S0",        956.0,    "mg/L";
    EApplied, e_applied,"E_applied", 0.6,      "V";
    ECemf,    e_cemf,   "E_CEMF",    -0.34,    "V";
    ASurA,    a_sur_a,  "A_surA",    0.4,      "m^2";
    I0,       i0,       "i0",        1.0,      "A/m^2";
    V,        v,        "V",         0.09,     "L";
    T,        t,        "T",         298.15,   "K";
    P,        p,        "P",         1.0,      "atm";
    F,        f,        "F",         96485.0,  "A s/mol";
    R,        r,        "R",         8.3145,   "J/mol/K";
    MuMaxE,   mu_max_e, "mu_max_e",  2.43,     "1/day";
    MuMaxM,   mu_max_m, "mu_max_m",  0.3,      "1/day";
    QMaxE,    q_max_e,  "q_max_e",   4.82,     "mg-S/mg-X/day";
    QMaxM,    q_max_m,  "q_max_m",   4.0,      "mg-S/mg-X/day";
    KSE,      k_s_e,    "K_S_e",     800.0,    "mg/L";
    KSM,      k_s_m,    "K_S_m",     810.0,    "mg/L";
    KM,       k_m,      "K_M",       0.0,      "mg/L";
    KDE,      k_d_e,    "K_d_e",     0.04,     "1/day";
    KDM,      k_d_m,    "K_d_m",     0.002,    "1/day";
    KX,       k_x,      "K_X",       0.04,     "-";
    XMax1,    x_max1,   "X_max1",    900.0,    "mg/L";
    XMax2,    x_max2,   "X_max2",    512.5,    "mg/L";
    YM,       y_m,      "Y_M",       40.7,     "mg-M/mg-S";
    RMin,     r_min,    "R_min",     25.0,     "ohm";
    RMax,     r_max,    "R_max",     2000.0,   "ohm";
    KR,       k_r,      "K_R",       0.06,     "L/mg";
    MTotal,   m_total,  "M_total",   0.0,      "mg/L";
    Gamma,    gamma,    "gamma",     663400.0, "mg-M/mol-M";
    M,        m,        "m",         2.0,      "mol e/mol M";
    Beta,     beta,     "beta",      0.5,      "-";
}

impl ParamId {
    /// Kinetic parameters plus Y_M and K_R: the default sensitivity subset.
    pub const KINETIC: &'static [ParamId] = &[
        ParamId::MuMaxE,
        ParamId::MuMaxM,
        ParamId::QMaxE,
        ParamId::QMaxM,
        ParamId::KSE,
        ParamId::KSM,
        ParamId::KM,
        ParamId::KDE,
        ParamId::KDM,
        ParamId::YM,
        ParamId::KR,
    ];

    /// The parameters fitted to current density by default.
    pub const FITTED: &'static [ParamId] = &[ParamId::MuMaxE, ParamId::QMaxE, ParamId::YM];
}

// Keys compare with underscores stripped, so `K_Se`, `K_S_e` and `KSe` all
// name the same constant.
fn squash(s: &str) -> String {
    s.chars().filter(|c| *c != '_').collect()
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let want = squash(s.trim());
        ParamId::ALL
            .iter()
            .copied()
            .find(|id| squash(id.key()) == want)
            .ok_or_else(|| Error::UnknownParameter(s.trim().to_string()))
    }
}

impl From<ParamId> for String {
    fn from(id: ParamId) -> String {
        id.key().to_string()
    }
}

impl TryFrom<String> for ParamId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Faraday constant in the two unit systems used by the model: coulombs for
/// the voltage terms and ampere-days for the mediator source term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalScale {
    pub f_volt: f64,
    pub f_day: f64,
}

impl PhysicalScale {
    pub fn new(f_volt: f64) -> Self {
        PhysicalScale {
            f_volt,
            f_day: f_volt / SECONDS_PER_DAY,
        }
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        ParameterSet::reference()
    }
}

impl ParameterSet {
    pub fn scale(&self) -> PhysicalScale {
        PhysicalScale::new(self.f)
    }

    /// Thermal voltage RT/(mF) in volts.
    pub fn thermal_voltage(&self) -> f64 {
        self.r * self.t / (self.m * self.f)
    }

    /// Mediator source coefficient gamma/(V m F_day), mg/L per A per day.
    pub fn mediator_gain(&self) -> f64 {
        self.gamma / (self.v * self.m * self.scale().f_day)
    }

    /// Current density in A/m^3 for a current in amperes.
    pub fn current_density(&self, i_mec: f64) -> f64 {
        1000.0 / self.v * i_mec
    }

    pub fn current_from_density(&self, density: f64) -> f64 {
        density * self.v / 1000.0
    }

    pub fn with(&self, id: ParamId, value: f64) -> Self {
        let mut p = self.clone();
        p.set(id, value);
        p
    }

    pub fn with_dilution(&self, d: f64) -> Self {
        self.with(ParamId::D, d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameters(msg));
        for &id in ParamId::ALL {
            let v = self.get(id);
            if !v.is_finite() {
                return bad(format!("{id} is not finite"));
            }
            let must_be_positive = !matches!(id, ParamId::D | ParamId::EApplied | ParamId::ECemf);
            if must_be_positive && v <= 0.0 {
                return bad(format!("{id} must be positive (got {v})"));
            }
        }
        if self.d < 0.0 {
            return bad(format!("D must be nonnegative (got {})", self.d));
        }
        if self.beta >= 1.0 {
            return bad(format!("beta must lie in (0, 1) (got {})", self.beta));
        }
        if self.r_max <= self.r_min {
            return bad("R_max must exceed R_min".into());
        }
        if self.k_m >= self.m_total {
            return bad("K_M must be smaller than M_total".into());
        }
        Ok(())
    }

    /// Parses `name = value` lines. Values may be products of numbers and
    /// parameter names (`0.2*M_total`); keys not mentioned keep their reference
    /// value. Expressions see the final value of the names they reference.
    pub fn parse(text: &str) -> Result<Self> {
        let mut exprs: BTreeMap<ParamId, (usize, Vec<String>)> = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: k + 1,
                message: format!("expected `name = value`, found `{line}`"),
            })?;
            let id: ParamId = key.parse().map_err(|_| Error::Parse {
                line: k + 1,
                message: format!("unknown parameter `{}`", key.trim()),
            })?;
            let factors: Vec<String> = value.split('*').map(|s| s.trim().to_string()).collect();
            if factors.iter().any(|f| f.is_empty()) {
                return Err(Error::Parse {
                    line: k + 1,
                    message: format!("malformed value `{}`", value.trim()),
                });
            }
            exprs.insert(id, (k + 1, factors));
        }

        // Start from the reference set with expression-defined defaults resolved from
        // whatever the file overrides.
        let mut p = ParameterSet::reference();
        let mut pending: Vec<ParamId> = exprs.keys().copied().collect();
        if !exprs.contains_key(&ParamId::MTotal) {
            exprs.insert(ParamId::MTotal, (0, vec!["0.05".into(), "X_max2".into()]));
            pending.push(ParamId::MTotal);
        }
        if !exprs.contains_key(&ParamId::KM) {
            exprs.insert(ParamId::KM, (0, vec!["0.2".into(), "M_total".into()]));
            pending.push(ParamId::KM);
        }

        let mut done: Vec<ParamId> = Vec::new();
        while !pending.is_empty() {
            let before = pending.len();
            let mut k = 0;
            while k < pending.len() {
                let id = pending[k];
                let (line, factors) = &exprs[&id];
                let mut value = 1.0;
                let mut ready = true;
                for f in factors {
                    if let Ok(x) = f.parse::<f64>() {
                        value *= x;
                        continue;
                    }
                    let dep: ParamId = f.parse().map_err(|_| Error::Parse {
                        line: *line,
                        message: format!("`{f}` is neither a number nor a parameter"),
                    })?;
                    if exprs.contains_key(&dep) && !done.contains(&dep) {
                        ready = false;
                        break;
                    }
                    value *= p.get(dep);
                }
                if ready {
                    p.set(id, value);
                    done.push(id);
                    pending.remove(k);
                } else {
                    k += 1;
                }
            }
            if pending.len() == before {
                return Err(Error::Parse {
                    line: exprs[&pending[0]].0,
                    message: "circular parameter expressions".into(),
                });
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    /// Writes every value as a literal, one per line.
    pub fn to_params_string(&self) -> String {
        let mut out = String::new();
        for &id in ParamId::ALL {
            out.push_str(&format!("{} = {:?}\n", id.key(), self.get(id)));
        }
        out
    }
}
