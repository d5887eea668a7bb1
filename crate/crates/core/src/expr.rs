//! A small arithmetic language for regressor rows and bound functions.
//!
//! Grammar, loosest to tightest binding:
//!
//! | level | operators     | associativity |
//! |-------|---------------|---------------|
//! | 1     | `+` `-`       | left          |
//! | 2     | `*` `/`       | left          |
//! | 3     | unary `-`     | prefix        |
//! | 4     | `^`           | right         |
//!
//! Atoms are numeric literals, the state variables `x1..xr`, the time `t`,
//! parenthesized expressions and calls to `sin cos tanh exp abs sqrt`.
//! The exponent of `^` may itself carry a unary minus (`2^-1`).

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdent { offset: usize, name: String },

    #[error("variable x{index} exceeds state dimension {order}")]
    Binding { index: usize, order: usize },

    #[error("evaluation of `{expr}` failed: {message}")]
    Eval { expr: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tanh,
    Exp,
    Abs,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// State component, 1-based (`x1` is the output).
    Var(usize),
    Time,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    /// Largest state index referenced, 0 if none.
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Time => 0,
            Expr::Var(i) => *i,
            Expr::Neg(e) | Expr::Call(_, e) => e.max_var(),
            Expr::Bin(_, a, b) => a.max_var().max(b.max_var()),
        }
    }

    pub fn depends_on_time(&self) -> bool {
        match self {
            Expr::Time => true,
            Expr::Num(_) | Expr::Var(_) => false,
            Expr::Neg(e) | Expr::Call(_, e) => e.depends_on_time(),
            Expr::Bin(_, a, b) => a.depends_on_time() || b.depends_on_time(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(i) => write!(f, "x{i}"),
            Expr::Time => write!(f, "t"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax { offset: self.pos, message: message.into() })
    }

    fn expect(&mut self, want: char) -> Result<(), ExprError> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(c) => self.err(format!("expected `{want}`, found `{c}`")),
            None => self.err(format!("expected `{want}`, found end of input")),
        }
    }

    fn additive(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Some('+') => BinOp::Add,
                Some('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.multiplicative()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some('*') => BinOp::Mul,
                Some('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == Some('-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::bin(BinOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut k = end + 1;
            if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                k += 1;
            }
            if k < bytes.len() && bytes[k].is_ascii_digit() {
                while k < bytes.len() && bytes[k].is_ascii_digit() {
                    k += 1;
                }
                end = k;
            }
        }
        let text = &self.src[start..end];
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = end;
                Ok(Expr::Num(v))
            }
            Err(_) => self.err(format!("malformed number `{text}`")),
        }
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            None => self.err("unexpected end of input"),
            Some('(') => {
                self.pos += 1;
                let e = self.additive()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                let bytes = self.src.as_bytes();
                let mut end = start;
                while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                    end += 1;
                }
                let name = &self.src[start..end];
                self.pos = end;
                if name == "t" {
                    return Ok(Expr::Time);
                }
                if let Some(idx) = name.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()) {
                    if idx >= 1 && !name[1..].starts_with('0') {
                        return Ok(Expr::Var(idx));
                    }
                }
                if let Some(func) = Func::from_name(name) {
                    self.expect('(')?;
                    let arg = self.additive()?;
                    self.expect(')')?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                Err(ExprError::UnknownIdent { offset: start, name: name.to_string() })
            }
            Some(c) => self.err(format!("unexpected character `{c}`")),
        }
    }
}

pub fn parse(source: &str) -> Result<Expr, ExprError> {
    let mut p = Parser { src: source, pos: 0 };
    let e = p.additive()?;
    if let Some(c) = p.peek() {
        return p.err(format!("unexpected trailing `{c}`"));
    }
    Ok(e)
}

/// An expression checked against a state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundExpr {
    expr: Expr,
    order: usize,
}

impl BoundExpr {
    pub fn bind(expr: Expr, order: usize) -> Result<Self, ExprError> {
        let idx = expr.max_var();
        if idx > order {
            return Err(ExprError::Binding { index: idx, order });
        }
        Ok(Self { expr, order })
    }

    pub fn parse(source: &str, order: usize) -> Result<Self, ExprError> {
        Self::bind(parse(source)?, order)
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Evaluates at state `x` (length at least `order`) and time `t`.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64, ExprError> {
        debug_assert!(x.len() >= self.order);
        eval(&self.expr, x, t)
    }
}

fn fail(e: &Expr, message: impl Into<String>) -> ExprError {
    ExprError::Eval { expr: e.to_string(), message: message.into() }
}

fn finite(e: &Expr, v: f64) -> Result<f64, ExprError> {
    if v.is_finite() { Ok(v) } else { Err(fail(e, format!("non-finite result {v}"))) }
}

/// IEEE double evaluation with guarded division, square root and powers.
pub fn eval(e: &Expr, x: &[f64], t: f64) -> Result<f64, ExprError> {
    let v = match e {
        Expr::Num(v) => *v,
        Expr::Time => t,
        Expr::Var(i) => *x.get(i - 1).ok_or_else(|| fail(e, format!("state has no component {i}")))?,
        Expr::Neg(a) => -eval(a, x, t)?,
        Expr::Bin(op, a, b) => {
            let a = eval(a, x, t)?;
            let b = eval(b, x, t)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(fail(e, "division by zero"));
                    }
                    a / b
                }
                BinOp::Pow => {
                    if a < 0.0 && b.fract() != 0.0 {
                        return Err(fail(e, "non-integer power of a negative base"));
                    }
                    if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
                        a.powi(b as i32)
                    } else {
                        a.powf(b)
                    }
                }
            }
        }
        Expr::Call(func, a) => {
            let a = eval(a, x, t)?;
            match func {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tanh => a.tanh(),
                Func::Exp => a.exp(),
                Func::Abs => a.abs(),
                Func::Sqrt => {
                    if a < 0.0 {
                        return Err(fail(e, "square root of a negative number"));
                    }
                    a.sqrt()
                }
            }
        }
    };
    finite(e, v)
}

/// Sampling box and time grid for the regressor bound check.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleBox {
    /// Each state component is sampled in `[-half_width, half_width]`.
    pub half_width: f64,
    pub points_per_axis: usize,
    pub t_max: f64,
    pub t_points: usize,
    pub tolerance: f64,
}

impl Default for SampleBox {
    fn default() -> Self {
        Self { half_width: 5.0, points_per_axis: 9, t_max: 20.0, t_points: 41, tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BoundCheck {
    pub passed: bool,
    /// Smallest `φ(x) − ‖f(x, t)‖` seen; negative means a counterexample.
    pub worst_margin: f64,
    pub worst_state: Vec<f64>,
    pub worst_time: f64,
    pub samples: usize,
    /// Always a falsification check over finitely many samples, never a proof.
    pub note: &'static str,
}

/// Spot-checks `‖f(x, t)‖ ≤ φ(x)` on a sampling grid.
pub fn check_assumption6(rows: &[BoundExpr], phi: &BoundExpr, sample: &SampleBox) -> BoundCheck {
    let order = rows.iter().map(|r| r.order()).chain([phi.order()]).max().unwrap_or(1).max(1);
    let axis: Vec<f64> = if sample.points_per_axis <= 1 {
        vec![0.0]
    } else {
        (0..sample.points_per_axis)
            .map(|k| -sample.half_width + 2.0 * sample.half_width * k as f64 / (sample.points_per_axis - 1) as f64)
            .collect()
    };
    let times: Vec<f64> = if sample.t_points <= 1 {
        vec![0.0]
    } else {
        (0..sample.t_points).map(|k| sample.t_max * k as f64 / (sample.t_points - 1) as f64).collect()
    };
    let mut worst = BoundCheck {
        passed: true,
        worst_margin: f64::INFINITY,
        worst_state: vec![0.0; order],
        worst_time: 0.0,
        samples: 0,
        note: "sampling-based falsification check, not a proof",
    };
    let mut idx = vec![0usize; order];
    let mut x = vec![0.0; order];
    loop {
        for (xi, &k) in x.iter_mut().zip(&idx) {
            *xi = axis[k];
        }
        for &t in &times {
            worst.samples += 1;
            let margin = (|| -> Result<f64, ExprError> {
                let mut sq = 0.0;
                for r in rows {
                    let v = r.eval(&x, t)?;
                    sq += v * v;
                }
                Ok(phi.eval(&x, t)? - sq.sqrt())
            })()
            .unwrap_or(f64::NEG_INFINITY);
            if margin < worst.worst_margin {
                worst.worst_margin = margin;
                worst.worst_state = x.clone();
                worst.worst_time = t;
            }
        }
        // odometer over the sampling grid
        let mut d = 0;
        loop {
            if d == order {
                worst.passed = worst.worst_margin >= -sample.tolerance;
                return worst;
            }
            idx[d] += 1;
            if idx[d] < axis.len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    #[test]
    fn precedence() {
        let e = parse("x1 + 2*sin(t)").unwrap();
        let expected = Expr::bin(
            BinOp::Add,
            Expr::Var(1),
            Expr::bin(BinOp::Mul, num(2.0), Expr::Call(Func::Sin, Box::new(Expr::Time))),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn power_is_right_associative() {
        let e = parse("x1^2^3").unwrap();
        assert_eq!(e, Expr::bin(BinOp::Pow, Expr::Var(1), Expr::bin(BinOp::Pow, num(2.0), num(3.0))));
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        assert_eq!(parse("-x1^2").unwrap(), Expr::Neg(Box::new(Expr::bin(BinOp::Pow, Expr::Var(1), num(2.0)))));
        assert_eq!(eval(&parse("-2^2").unwrap(), &[], 0.0).unwrap(), -4.0);
        assert_eq!(eval(&parse("2^-1").unwrap(), &[], 0.0).unwrap(), 0.5);
    }

    #[test]
    fn subtraction_is_left_associative() {
        assert_eq!(eval(&parse("10 - 4 - 3").unwrap(), &[], 0.0).unwrap(), 3.0);
        assert_eq!(eval(&parse("12 / 3 / 2").unwrap(), &[], 0.0).unwrap(), 2.0);
    }

    #[test]
    fn binding_checks_arity() {
        let err = BoundExpr::parse("x3 + 1", 2).unwrap_err();
        assert_eq!(err, ExprError::Binding { index: 3, order: 2 });
        assert!(err.to_string().contains("x3"));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse("x1 + * 2") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        match parse("x1 + foo(2)") {
            Err(ExprError::UnknownIdent { offset, name }) => {
                assert_eq!(offset, 5);
                assert_eq!(name, "foo");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse("(x1").is_err());
        assert!(parse("x0").is_err());
        assert!(parse("x1 x2").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(BoundExpr::parse("x1*cos(t)", 1).unwrap().eval(&[2.0], 0.0).unwrap(), 2.0);
        let v = BoundExpr::parse("sin(t)*x2", 2).unwrap().eval(&[0.0, 3.0], std::f64::consts::FRAC_PI_2).unwrap();
        assert_eq!(v, 3.0);
        let err = BoundExpr::parse("1/x1", 1).unwrap().eval(&[0.0], 0.0).unwrap_err();
        assert!(matches!(err, ExprError::Eval { .. }));
        assert!(err.to_string().contains("(1 / x1)"));
    }

    #[test]
    fn guarded_operations() {
        assert!(eval(&parse("sqrt(x1)").unwrap(), &[-1.0], 0.0).is_err());
        assert!(eval(&parse("x1^0.5").unwrap(), &[-4.0], 0.0).is_err());
        assert_eq!(eval(&parse("x1^3").unwrap(), &[-2.0], 0.0).unwrap(), -8.0);
        assert!(eval(&parse("exp(x1)").unwrap(), &[1000.0], 0.0).is_err());
        assert_eq!(eval(&parse("1e-3 * 2E2").unwrap(), &[], 0.0).unwrap(), 0.2);
    }

    #[test]
    fn bound_check_examples() {
        let sample = SampleBox::default();
        let rows = [BoundExpr::parse("sin(t)*x1", 1).unwrap()];
        assert!(check_assumption6(&rows, &BoundExpr::parse("abs(x1)", 1).unwrap(), &sample).passed);

        let rows = [BoundExpr::parse("t*x1", 1).unwrap()];
        let report = check_assumption6(&rows, &BoundExpr::parse("abs(x1)", 1).unwrap(), &sample);
        assert!(!report.passed);
        assert!(report.worst_time > 1.0);

        let rows = [BoundExpr::parse("x1^2", 1).unwrap()];
        assert!(check_assumption6(&rows, &BoundExpr::parse("x1^2 + 1", 1).unwrap(), &sample).passed);
    }

    #[test]
    fn time_invariant_rows_bound_themselves() {
        let rows = [BoundExpr::parse("x1*x2 - tanh(x2)", 2).unwrap()];
        let phi = BoundExpr::parse("abs(x1*x2 - tanh(x2))", 2).unwrap();
        assert!(!rows[0].expr().depends_on_time());
        assert!(check_assumption6(&rows, &phi, &SampleBox::default()).passed);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|v| Expr::Num(v as f64 / 8.0)),
            (1usize..4).prop_map(Expr::Var),
            Just(Expr::Time),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (inner.clone(), inner.clone(), 0usize..5).prop_map(|(a, b, k)| {
                    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow][k];
                    Expr::bin(op, a, b)
                }),
                (inner, 0usize..6).prop_map(|(a, k)| {
                    let f = [Func::Sin, Func::Cos, Func::Tanh, Func::Exp, Func::Abs, Func::Sqrt][k];
                    Expr::Call(f, Box::new(a))
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_is_identity(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse(&printed).unwrap();
            prop_assert_eq!(&reparsed, &e);
            prop_assert_eq!(parse(&reparsed.to_string()).unwrap(), reparsed);
        }

        #[test]
        fn eval_is_deterministic(e in arb_expr(), x in prop::array::uniform3(-3.0f64..3.0), t in 0.0f64..10.0) {
            let a = eval(&e, &x, t);
            let b = eval(&e, &x, t);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (Err(a), Err(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false, "evaluation outcome changed between calls"),
            }
        }
    }
}
