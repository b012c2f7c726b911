//! Linear program representation for coalition dispatch.

/// `min c.x` subject to variable bounds, equality rows and two-sided ranged
/// rows. Coefficients are sparse per row; labels keep solver diagnostics
/// readable.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub equalities: Vec<LinearRow>,
    pub ranges: Vec<RangedRow>,
}

/// `coeffs . x = rhs`
#[derive(Debug, Clone)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
    pub label: String,
}

/// `lo <= coeffs . x <= hi`
#[derive(Debug, Clone)]
pub struct RangedRow {
    pub coeffs: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
    pub label: String,
}

impl LinearProgram {
    pub fn empty() -> Self {
        LinearProgram {
            n_vars: 0,
            objective: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            equalities: Vec::new(),
            ranges: Vec::new(),
        }
    }

    /// Plain-text form of the whole program, for debugging failed solves.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let term = |coeffs: &[(usize, f64)]| {
            coeffs
                .iter()
                .map(|(j, a)| format!("{a:+.6}*x{j}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let obj: Vec<(usize, f64)> = self
            .objective
            .iter()
            .enumerate()
            .map(|(j, c)| (j, *c))
            .collect();
        writeln!(out, "min {}", term(&obj)).unwrap();
        for row in &self.equalities {
            writeln!(out, "  [{}] {} = {:.6}", row.label, term(&row.coeffs), row.rhs).unwrap();
        }
        for row in &self.ranges {
            writeln!(
                out,
                "  [{}] {:.6} <= {} <= {:.6}",
                row.label,
                row.lo,
                term(&row.coeffs),
                row.hi
            )
            .unwrap();
        }
        for j in 0..self.n_vars {
            writeln!(out, "  {:.6} <= x{j} <= {:.6}", self.lower[j], self.upper[j]).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_mentions_every_part() {
        let lp = LinearProgram {
            n_vars: 2,
            objective: vec![1.0, -2.0],
            lower: vec![0.0, 0.0],
            upper: vec![5.0, 3.0],
            equalities: vec![LinearRow {
                coeffs: vec![(0, 1.0), (1, -1.0)],
                rhs: 0.0,
                label: "balance".into(),
            }],
            ranges: vec![RangedRow {
                coeffs: vec![(0, 0.5)],
                lo: -1.0,
                hi: 1.0,
                label: "flow[0]".into(),
            }],
        };
        let text = lp.dump();
        assert!(text.contains("min"));
        assert!(text.contains("balance"));
        assert!(text.contains("flow[0]"));
        assert!(text.contains("x1"));
    }
}
