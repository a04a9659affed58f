use rand::Rng;
use serde::{Deserialize, Serialize};

/// The 23 plate letters (Latin alphabet without Q, W and X).
pub const LETTERS: &str = "ABCDEFGHIJKLMNOPRSTUVYZ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Digits,
    Letters,
}

impl GroupKind {
    fn matches(&self, c: char) -> bool {
        match self {
            GroupKind::Digits => c.is_ascii_digit(),
            GroupKind::Letters => LETTERS.contains(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlateGroup {
    pub kind: GroupKind,
    pub min_len: usize,
    pub max_len: usize,
}

/// Plate grammar: an ordered list of digit/letter groups plus a total length range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlateFormat {
    pub groups: Vec<PlateGroup>,
    pub min_total: usize,
    pub max_total: usize,
}

impl Default for PlateFormat {
    /// `DD L{1,3} D{2,4}`, 7 or 8 characters in total.
    fn default() -> Self {
        let g = |kind, min_len, max_len| PlateGroup {
            kind,
            min_len,
            max_len,
        };
        Self {
            groups: vec![
                g(GroupKind::Digits, 2, 2),
                g(GroupKind::Letters, 1, 3),
                g(GroupKind::Digits, 2, 4),
            ],
            min_total: 7,
            max_total: 8,
        }
    }
}

impl PlateFormat {
    /// Every admissible assignment of group lengths, in lexicographic order.
    pub fn length_combinations(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = Vec::with_capacity(self.groups.len());
        self.combos(0, &mut cur, &mut out);
        out
    }

    fn combos(&self, i: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == self.groups.len() {
            let total: usize = cur.iter().sum();
            if (self.min_total..=self.max_total).contains(&total) {
                out.push(cur.clone());
            }
            return;
        }
        for len in self.groups[i].min_len..=self.groups[i].max_len {
            cur.push(len);
            self.combos(i + 1, cur, out);
            cur.pop();
        }
    }

    /// True if `text` parses as the group sequence of this format.
    pub fn validate(&self, text: &str) -> bool {
        let chars: Vec<char> = text.chars().collect();
        if !(self.min_total..=self.max_total).contains(&chars.len()) {
            return false;
        }
        self.length_combinations().iter().any(|lens| {
            if lens.iter().sum::<usize>() != chars.len() {
                return false;
            }
            let mut pos = 0;
            lens.iter().zip(&self.groups).all(|(&len, g)| {
                let ok = chars[pos..pos + len].iter().all(|&c| g.kind.matches(c));
                pos += len;
                ok
            })
        })
    }
}

/// Draws group lengths uniformly over the admissible combinations, then each
/// character uniformly from its group's alphabet.
pub fn generate_plate_string(format: &PlateFormat, rng: &mut impl Rng) -> String {
    let combos = format.length_combinations();
    assert!(!combos.is_empty(), "plate format admits no string");
    let lens = &combos[rng.random_range(0..combos.len())];
    let letters: Vec<char> = LETTERS.chars().collect();
    let mut s = String::new();
    for (&len, g) in lens.iter().zip(&format.groups) {
        for _ in 0..len {
            let c = match g.kind {
                GroupKind::Digits => char::from(b'0' + rng.random_range(0..10u8)),
                GroupKind::Letters => letters[rng.random_range(0..letters.len())],
            };
            s.push(c);
        }
    }
    s
}
