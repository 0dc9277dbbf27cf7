use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use super::template::{ModelTemplate, ParameterSet, RateParameter};
use super::{LevelGraph, Manifold};
use crate::error::{Error, Result};

/// Generator split by laser-power exponent: `M(P) = M₀ + P·M₁ + P²·M₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParts {
    parts: [DMatrix<f64>; 3],
}

impl GeneratorParts {
    pub fn from_graph(graph: &LevelGraph) -> Self {
        let n = graph.len();
        let mut parts = [DMatrix::zeros(n, n), DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
        for e in graph.edges() {
            let i = graph.index_of(&e.from).expect("validated edge");
            let j = graph.index_of(&e.to).expect("validated edge");
            let m = &mut parts[e.power_exponent as usize];
            m[(j, i)] += e.coefficient;
            m[(i, i)] -= e.coefficient;
        }
        GeneratorParts { parts }
    }

    /// Parts of `∂M/∂p` for a template at the given parameter values.
    pub fn derivative(template: &ModelTemplate, params: &ParameterSet, p: RateParameter) -> Result<Self> {
        let n = template.states.len();
        let index = |label: &str| {
            template
                .states
                .iter()
                .position(|s| s.label == label)
                .ok_or_else(|| Error::validation(format!("template edge endpoint '{label}' missing")))
        };
        let mut parts = [DMatrix::zeros(n, n), DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
        for (e, d) in template.edges.iter().zip(template.edge_derivatives(params, p)?) {
            if d == 0.0 {
                continue;
            }
            let i = index(&e.from)?;
            let j = index(&e.to)?;
            let m = &mut parts[e.power_exponent as usize];
            m[(j, i)] += d;
            m[(i, i)] -= d;
        }
        Ok(GeneratorParts { parts })
    }

    pub fn dim(&self) -> usize {
        self.parts[0].nrows()
    }

    pub fn at(&self, power: f64) -> DMatrix<f64> {
        let mut m = self.parts[0].clone();
        if power != 0.0 {
            m += &self.parts[1] * power;
            m += &self.parts[2] * (power * power);
        }
        m
    }

    pub fn is_zero(&self) -> bool {
        self.parts.iter().all(|m| m.iter().all(|&x| x == 0.0))
    }
}

/// Generator matrix (MHz) of `graph` at laser power `power` (mW). Column `i`
/// holds the out-rates of state `i`; columns sum to zero.
pub fn build_rate_matrix(graph: &LevelGraph, power: f64) -> Result<DMatrix<f64>> {
    if !(power >= 0.0) || !power.is_finite() {
        return Err(Error::validation(format!("laser power {power} mW must be >= 0")));
    }
    Ok(GeneratorParts::from_graph(graph).at(power))
}

/// Singlet lifetime in ns from the singlet return rates (MHz).
pub fn analytic_singlet_lifetime(kappa0: f64, kappa1: f64) -> Result<f64> {
    let total = kappa0 + 2.0 * kappa1;
    if kappa0 < 0.0 || kappa1 < 0.0 {
        return Err(Error::validation("singlet rates must be >= 0"));
    }
    if !(total > 0.0) {
        return Err(Error::validation("kappa0 + 2 kappa1 = 0: singlet lifetime is infinite"));
    }
    Ok(1000.0 / total)
}

/// Equal occupation of the triplet ground sublevels.
pub fn thermal_state(graph: &LevelGraph) -> Result<DVector<f64>> {
    let ground = graph.indices_in(Manifold::TripletGround);
    if ground.is_empty() {
        return Err(Error::validation("graph has no triplet-ground states"));
    }
    let mut p = DVector::zeros(graph.len());
    let w = 1.0 / ground.len() as f64;
    for i in ground {
        p[i] = w;
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub populations: DVector<f64>,
    /// Number of closed communicating classes; more than one means the kernel
    /// is degenerate and the result depends on `reference`.
    pub closed_classes: usize,
}

impl SteadyState {
    pub fn degenerate(&self) -> bool {
        self.closed_classes > 1
    }
}

/// Normalized nonnegative kernel vector of a generator.
///
/// Closed classes are found from the positive off-diagonal pattern. With one
/// closed class the kernel is unique. Otherwise the result is the long-time
/// limit reached from `reference` (typically the thermal state): each closed
/// class receives its absorbed probability mass, distributed by that class's
/// own stationary vector.
pub fn steady_state(generator: &DMatrix<f64>, reference: &DVector<f64>) -> Result<SteadyState> {
    let n = generator.nrows();
    if n == 0 || generator.ncols() != n || reference.len() != n {
        return Err(Error::validation("steady_state: dimension mismatch"));
    }
    let mut g = DiGraph::<usize, ()>::with_capacity(n, n * n);
    let nodes: Vec<_> = (0..n).map(|i| g.add_node(i)).collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && generator[(j, i)] > 0.0 {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let sccs = tarjan_scc(&g);
    let mut class_of = vec![0usize; n];
    for (c, comp) in sccs.iter().enumerate() {
        for node in comp {
            class_of[g[*node]] = c;
        }
    }
    let closed: Vec<Vec<usize>> = sccs
        .iter()
        .enumerate()
        .filter(|(c, comp)| {
            comp.iter().all(|node| {
                let i = g[*node];
                (0..n).all(|j| j == i || generator[(j, i)] <= 0.0 || class_of[j] == *c)
            })
        })
        .map(|(_, comp)| {
            let mut idx: Vec<usize> = comp.iter().map(|node| g[*node]).collect();
            idx.sort_unstable();
            idx
        })
        .collect();

    let mut in_closed = vec![false; n];
    for c in &closed {
        for &i in c {
            in_closed[i] = true;
        }
    }
    let transient: Vec<usize> = (0..n).filter(|&i| !in_closed[i]).collect();

    let masses: Vec<f64> = if closed.len() == 1 {
        vec![1.0]
    } else {
        let mut occupation = DVector::zeros(transient.len());
        if !transient.is_empty() {
            let mtt = DMatrix::from_fn(transient.len(), transient.len(), |a, b| {
                generator[(transient[a], transient[b])]
            });
            let rhs = DVector::from_iterator(transient.len(), transient.iter().map(|&i| -reference[i]));
            occupation = mtt
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::numerical("transient block of generator is singular"))?;
        }
        closed
            .iter()
            .map(|c| {
                let direct: f64 = c.iter().map(|&j| reference[j]).sum();
                let inflow: f64 = c
                    .iter()
                    .map(|&j| {
                        transient
                            .iter()
                            .enumerate()
                            .map(|(a, &i)| generator[(j, i)] * occupation[a])
                            .sum::<f64>()
                    })
                    .sum();
                direct + inflow
            })
            .collect()
    };

    let mut p = DVector::zeros(n);
    for (c, &mass) in closed.iter().zip(&masses) {
        if mass == 0.0 {
            continue;
        }
        let pi = class_stationary(generator, c)?;
        for (k, &i) in c.iter().enumerate() {
            p[i] += mass * pi[k];
        }
    }
    let total: f64 = p.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::numerical("no nonnegative normalized kernel vector"));
    }
    p /= total;
    let most_negative = p.iter().copied().fold(0.0f64, f64::min);
    if most_negative < -1e-9 {
        return Err(Error::numerical(format!(
            "steady state has negative population {most_negative:e}"
        )));
    }
    p.iter_mut().for_each(|x| *x = x.max(0.0));
    let total: f64 = p.iter().sum();
    p /= total;
    Ok(SteadyState {
        populations: p,
        closed_classes: closed.len(),
    })
}

fn class_stationary(generator: &DMatrix<f64>, class: &[usize]) -> Result<DVector<f64>> {
    let k = class.len();
    if k == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    let mut a = DMatrix::from_fn(k, k, |r, c| generator[(class[r], class[c])]);
    for c in 0..k {
        a[(k - 1, c)] = 1.0;
    }
    let mut rhs = DVector::zeros(k);
    rhs[k - 1] = 1.0;
    a.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("closed class generator is singular"))
}

impl LevelGraph {
    /// Steady state at constant power, using the thermal state to resolve
    /// degenerate kernels.
    pub fn steady_state(&self, power: f64) -> Result<SteadyState> {
        let m = build_rate_matrix(self, power)?;
        steady_state(&m, &thermal_state(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{build_preset_7level, build_preset_9level, NineLevelRates, SevenLevelRates};

    fn column_sums(m: &DMatrix<f64>) -> Vec<f64> {
        (0..m.ncols()).map(|c| m.column(c).sum()).collect()
    }

    #[test]
    fn lifetime_values() {
        assert!((analytic_singlet_lifetime(56.0, 0.33).unwrap() - 17.6491).abs() < 1e-3);
        assert!((analytic_singlet_lifetime(37.0, 3.4).unwrap() - 22.831).abs() < 1e-3);
        assert_eq!(analytic_singlet_lifetime(1.0, 0.0).unwrap(), 1000.0);
        assert!(analytic_singlet_lifetime(0.0, 0.0).is_err());
    }

    #[test]
    fn power_scaling_of_pump_entries() {
        let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
        let m = build_rate_matrix(&g, 13.6).unwrap();
        let (g0, e0) = (g.index_of("g0").unwrap(), g.index_of("e0").unwrap());
        assert!((m[(e0, g0)] - 2.98 * 13.6).abs() < 1e-12);
        assert!((m[(e0, g0)] - 40.528).abs() < 1e-9);
        let m0 = build_rate_matrix(&g, 0.0).unwrap();
        assert_eq!(m0[(e0, g0)], 0.0);
        assert!(build_rate_matrix(&g, -1.0).is_err());
        for s in column_sums(&m) {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn thermal_state_shapes() {
        let g7 = build_preset_7level(&SevenLevelRates::reference()).unwrap();
        let p = thermal_state(&g7).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(p.as_slice(), &[third, third, third, 0.0, 0.0, 0.0, 0.0]);
        let g9 = build_preset_9level(&NineLevelRates::reference()).unwrap();
        let p9 = thermal_state(&g9).unwrap();
        assert_eq!(p9.len(), 9);
        assert!((p9.sum() - 1.0).abs() < 1e-12);
        assert_eq!(p9[7] + p9[8], 0.0);
    }

    #[test]
    fn steady_state_at_zero_power_stays_in_ground() {
        let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
        let ss = g.steady_state(0.0).unwrap();
        assert!(ss.degenerate());
        assert_eq!(ss.closed_classes, 3);
        for i in 3..7 {
            assert_eq!(ss.populations[i], 0.0);
        }
        assert!((ss.populations.sum() - 1.0).abs() < 1e-12);
        // thermal reference keeps equal thirds
        assert!((ss.populations[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn steady_state_is_in_kernel() {
        let r7 = SevenLevelRates::reference();
        let g7 = build_preset_7level(&r7).unwrap();
        let g9 = build_preset_9level(&NineLevelRates::reference()).unwrap();
        for (g, power) in [(&g7, 13.6), (&g9, 13.6), (&g9, 21.3), (&g7, 3.71)] {
            let m = build_rate_matrix(g, power).unwrap();
            let ss = g.steady_state(power).unwrap();
            assert!(!ss.degenerate());
            let residual = (&m * &ss.populations).norm();
            assert!(residual <= 1e-10, "residual {residual}");
            assert!((ss.populations.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_kernel_uses_absorption_from_reference() {
        // a -> b (1), a -> c (3); b and c absorbing
        let m = DMatrix::from_row_slice(3, 3, &[-4.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let reference = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let ss = steady_state(&m, &reference).unwrap();
        assert_eq!(ss.closed_classes, 2);
        assert!((ss.populations[1] - 0.25).abs() < 1e-14);
        assert!((ss.populations[2] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn derivative_parts_match_difference_of_graphs() {
        let template = crate::kinetics::template_9level(true);
        let mut rates = NineLevelRates::reference();
        rates.base.t1_us = Some(17.0);
        let ps = rates.to_parameters();
        for p in template.parameters() {
            let d = GeneratorParts::derivative(&template, &ps, p).unwrap();
            let v = ps.get(p).unwrap();
            let h = 1e-6 * v.max(1e-3);
            let mut up = ps.clone();
            up.set(p, v + h);
            let mut dn = ps.clone();
            // one-sided at a zero-valued parameter
            let lo = if v - h < 0.0 { v } else { v - h };
            dn.set(p, lo);
            let gu = GeneratorParts::from_graph(&template.instantiate(&up).unwrap());
            let gd = GeneratorParts::from_graph(&template.instantiate(&dn).unwrap());
            for power in [0.0, 7.0] {
                let fd = (gu.at(power) - gd.at(power)) / (v + h - lo);
                let an = d.at(power);
                let scale = an.abs().max().max(1e-12);
                assert!((fd - &an).abs().max() / scale < 1e-6, "{p}");
            }
        }
    }
}
