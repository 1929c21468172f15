//! Architecture determination table.
//!
//! Each row lists nine requirement cells and a recommendation. A `*` cell
//! matches both Y and N; the throughput cell (L or XL) must match exactly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum YesNo {
    Y,
    N,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Throughput {
    L,
    XL,
}

impl FromStr for YesNo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "Y" | "y" => Ok(YesNo::Y),
            "N" | "n" => Ok(YesNo::N),
            other => Err(format!("expected Y or N, got {other:?}")),
        }
    }
}

impl FromStr for Throughput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "L" | "l" => Ok(Throughput::L),
            "XL" | "xl" => Ok(Throughput::XL),
            other => Err(format!("expected L or XL, got {other:?}")),
        }
    }
}

impl fmt::Display for YesNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            YesNo::Y => "Y",
            YesNo::N => "N",
        })
    }
}

impl fmt::Display for Throughput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Throughput::L => "L",
            Throughput::XL => "XL",
        })
    }
}

/// A concrete requirement vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureVector {
    pub predictable_latency: YesNo,
    pub complex_routing: YesNo,
    pub long_term_storage: YesNo,
    pub very_large_throughput_per_topic: YesNo,
    pub packet_order_important: YesNo,
    pub dynamic_elasticity: YesNo,
    pub system_throughput: Throughput,
    pub at_least_once: YesNo,
    pub high_availability: YesNo,
}

impl FeatureVector {
    /// The eight yes/no features in table column order (throughput excluded).
    pub fn flags(&self) -> [YesNo; 8] {
        [
            self.predictable_latency,
            self.complex_routing,
            self.long_term_storage,
            self.very_large_throughput_per_topic,
            self.packet_order_important,
            self.dynamic_elasticity,
            self.at_least_once,
            self.high_availability,
        ]
    }

    pub fn from_flags(f: [YesNo; 8], system_throughput: Throughput) -> Self {
        FeatureVector {
            predictable_latency: f[0],
            complex_routing: f[1],
            long_term_storage: f[2],
            very_large_throughput_per_topic: f[3],
            packet_order_important: f[4],
            dynamic_elasticity: f[5],
            system_throughput,
            at_least_once: f[6],
            high_availability: f[7],
        }
    }

    /// All 512 concrete vectors in a fixed order.
    pub fn all() -> Vec<FeatureVector> {
        let mut out = Vec::with_capacity(512);
        for tp in [Throughput::L, Throughput::XL] {
            for bits in 0u32..256 {
                let f = std::array::from_fn(|i| if bits >> (7 - i) & 1 == 1 { YesNo::Y } else { YesNo::N });
                out.push(FeatureVector::from_flags(f, tp));
            }
        }
        out
    }
}

impl fmt::Display for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.flags();
        write!(f, "{} {} {} {} {} {} {} {} {}", c[0], c[1], c[2], c[3], c[4], c[5], self.system_throughput, c[6], c[7])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Y,
    N,
    Any,
}

impl Cell {
    pub fn matches(self, v: YesNo) -> bool {
        match self {
            Cell::Any => true,
            Cell::Y => v == YesNo::Y,
            Cell::N => v == YesNo::N,
        }
    }
}

/// Throughput cell. The standard table only uses exact levels; `Any` is
/// available for custom tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThroughputCell {
    Exactly(Throughput),
    Any,
}

impl ThroughputCell {
    pub fn matches(self, t: Throughput) -> bool {
        match self {
            ThroughputCell::Any => true,
            ThroughputCell::Exactly(x) => x == t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    /// The eight yes/no cells in [`FeatureVector::flags`] order.
    pub cells: [Cell; 8],
    pub throughput: ThroughputCell,
    pub recommendation: String,
}

impl TableRow {
    /// Parse a row written in table column order, e.g.
    /// `"N N * * N N XL N N"`.
    pub fn parse(cells: &str, recommendation: &str) -> Result<Self, String> {
        let parts: Vec<&str> = cells.split_whitespace().collect();
        if parts.len() != 9 {
            return Err(format!("expected 9 cells, got {}", parts.len()));
        }
        let cell = |s: &str| match s {
            "Y" => Ok(Cell::Y),
            "N" => Ok(Cell::N),
            "*" => Ok(Cell::Any),
            other => Err(format!("bad cell {other:?}")),
        };
        let yn = [0, 1, 2, 3, 4, 5, 7, 8];
        let mut out = [Cell::Any; 8];
        for (slot, &i) in out.iter_mut().zip(&yn) {
            *slot = cell(parts[i])?;
        }
        if recommendation.is_empty() {
            return Err("empty recommendation".into());
        }
        let throughput = match parts[6] {
            "*" => ThroughputCell::Any,
            t => ThroughputCell::Exactly(t.parse()?),
        };
        Ok(TableRow { cells: out, throughput, recommendation: recommendation.to_string() })
    }

    pub fn matches(&self, fv: &FeatureVector) -> bool {
        self.throughput.matches(fv.system_throughput) && self.cells.iter().zip(fv.flags()).all(|(c, v)| c.matches(v))
    }
}

const ROWS: [(&str, &str); 8] = [
    ("N N * * N N XL N N", "Kafka with multiple partitions"),
    ("N N * * N N XL Y Y", "Kafka with replication and multiple partitions"),
    ("N N * * Y N L N N", "single partition Kafka"),
    ("N N * * Y N L Y Y", "single partition Kafka with replication"),
    ("* * N N * * L * N", "RabbitMQ"),
    ("* * N N * * L * Y", "RabbitMQ with queue replication"),
    ("* * Y N * * L * *", "RabbitMQ with Kafka long term storage"),
    ("N Y * * N N XL N *", "Kafka with selected RabbitMQ routing"),
];

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cell::Y => "Y",
            Cell::N => "N",
            Cell::Any => "*",
        })
    }
}

/// The nine cells in table column order, without the recommendation.
impl fmt::Display for TableRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.cells;
        let t = match self.throughput {
            ThroughputCell::Exactly(t) => t.to_string(),
            ThroughputCell::Any => "*".to_string(),
        };
        write!(f, "{} {} {} {} {} {} {} {} {}", c[0], c[1], c[2], c[3], c[4], c[5], t, c[6], c[7])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterminationTable {
    pub rows: Vec<TableRow>,
}

impl Default for DeterminationTable {
    fn default() -> Self {
        DeterminationTable::standard()
    }
}

impl DeterminationTable {
    /// The standard eight-row table.
    pub fn standard() -> Self {
        let rows = ROWS.iter().map(|(c, r)| TableRow::parse(c, r).expect("built-in row")).collect();
        DeterminationTable { rows }
    }

    /// Recommendations of every matching row, in table order.
    pub fn recommend(&self, fv: &FeatureVector) -> Vec<String> {
        self.rows.iter().filter(|r| r.matches(fv)).map(|r| r.recommendation.clone()).collect()
    }

    /// Concrete vectors no row matches, in [`FeatureVector::all`] order.
    pub fn coverage_report(&self) -> Vec<FeatureVector> {
        FeatureVector::all().into_iter().filter(|fv| self.recommend(fv).is_empty()).collect()
    }

    /// The same table with every `*` replaced by explicit Y and N rows.
    pub fn expanded(&self) -> Self {
        let mut rows = Vec::new();
        for r in &self.rows {
            let mut partial = vec![r.cells];
            for i in 0..8 {
                partial = partial
                    .into_iter()
                    .flat_map(|cells| {
                        if cells[i] == Cell::Any {
                            let mut y = cells;
                            let mut n = cells;
                            y[i] = Cell::Y;
                            n[i] = Cell::N;
                            vec![y, n]
                        } else {
                            vec![cells]
                        }
                    })
                    .collect();
            }
            let levels = match r.throughput {
                ThroughputCell::Any => vec![Throughput::L, Throughput::XL],
                ThroughputCell::Exactly(t) => vec![t],
            };
            for cells in partial {
                for &t in &levels {
                    rows.push(TableRow {
                        cells,
                        throughput: ThroughputCell::Exactly(t),
                        recommendation: r.recommendation.clone(),
                    });
                }
            }
        }
        DeterminationTable { rows }
    }
}

/// Shorthand for the standard table.
pub fn recommend(fv: &FeatureVector) -> Vec<String> {
    DeterminationTable::standard().recommend(fv)
}

pub fn coverage_report() -> Vec<FeatureVector> {
    DeterminationTable::standard().coverage_report()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(s: &str) -> FeatureVector {
        let p: Vec<&str> = s.split_whitespace().collect();
        let y = |i: usize| p[i].parse::<YesNo>().unwrap();
        FeatureVector::from_flags([y(0), y(1), y(2), y(3), y(4), y(5), y(7), y(8)], p[6].parse().unwrap())
    }

    #[test]
    fn examples() {
        assert_eq!(recommend(&fv("N N N N N N XL N N")), vec!["Kafka with multiple partitions"]);
        assert_eq!(recommend(&fv("Y Y N N Y Y L Y N")), vec!["RabbitMQ"]);
        assert_eq!(recommend(&fv("N Y N N N N XL N Y")), vec!["Kafka with selected RabbitMQ routing"]);
    }

    #[test]
    fn throughput_is_exact() {
        assert!(recommend(&fv("Y Y N N Y Y XL Y N")).is_empty());
    }

    #[test]
    fn degenerate_tables() {
        let empty = DeterminationTable { rows: vec![] };
        assert_eq!(empty.coverage_report().len(), 512);
        let all = DeterminationTable {
            rows: vec![TableRow::parse("* * * * * * * * *", "x").unwrap()],
        };
        assert!(all.coverage_report().is_empty());
    }

    #[test]
    fn display_round_trips_through_parse() {
        for v in FeatureVector::all().into_iter().step_by(37) {
            assert_eq!(fv(&v.to_string()), v);
        }
    }
}
