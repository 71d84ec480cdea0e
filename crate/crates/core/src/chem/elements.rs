use std::fmt;
use std::sync::OnceLock;

const TABLE: &str = include_str!("../../data/elements.tsv");

#[derive(Clone, Debug, PartialEq)]
pub struct ElementData {
    pub symbol: String,
    pub atomic_number: u8,
    pub standard_weight: f64,
    pub monoisotopic_mass: f64,
    pub valence_electrons: u8,
}

fn table() -> &'static [ElementData] {
    static CELL: OnceLock<Vec<ElementData>> = OnceLock::new();
    CELL.get_or_init(|| {
        TABLE
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                ElementData {
                    symbol: f[0].to_string(),
                    atomic_number: f[1].parse().expect("atomic number"),
                    standard_weight: f[2].parse().expect("standard weight"),
                    monoisotopic_mass: f[3].parse().expect("monoisotopic mass"),
                    valence_electrons: f[4].parse().expect("valence electrons"),
                }
            })
            .collect()
    })
}

/// An element from the bundled table, identified by atomic number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

impl Element {
    pub const H: Element = Element(1);
    pub const B: Element = Element(5);
    pub const C: Element = Element(6);
    pub const N: Element = Element(7);
    pub const O: Element = Element(8);
    pub const F: Element = Element(9);
    pub const P: Element = Element(15);
    pub const S: Element = Element(16);
    pub const CL: Element = Element(17);
    pub const BR: Element = Element(35);
    pub const I: Element = Element(53);

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn data(self) -> &'static ElementData {
        table()
            .iter()
            .find(|e| e.atomic_number == self.0)
            .expect("element constructed from the table")
    }

    pub fn symbol(self) -> &'static str {
        &self.data().symbol
    }

    pub fn is_hydrogen(self) -> bool {
        self == Element::H
    }

    pub fn is_halogen(self) -> bool {
        matches!(self, Element::F | Element::CL | Element::BR | Element::I)
    }

    /// Allowed valences of organic-subset elements, ascending.
    pub fn organic_valences(self) -> Option<&'static [u32]> {
        Some(match self {
            Element::B => &[3],
            Element::C => &[4],
            Element::N => &[3],
            Element::O => &[2],
            Element::P => &[3, 5],
            Element::S => &[2, 4, 6],
            Element::F | Element::CL | Element::BR | Element::I => &[1],
            _ => return None,
        })
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

pub fn element_by_symbol(symbol: &str) -> Option<Element> {
    table()
        .iter()
        .find(|e| e.symbol == symbol)
        .map(|e| Element(e.atomic_number))
}
