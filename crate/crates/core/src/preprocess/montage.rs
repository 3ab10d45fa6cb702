//! Electrode coordinate files: one `name x y z` line per channel.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Electrode {
    pub name: String,
    pub position: [f64; 3],
}

pub fn parse_coordinates(text: &str) -> Result<Vec<Electrode>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!(
                "coordinates line {}: expected `name x y z`, got {line:?}",
                lineno + 1
            )));
        }
        let mut position = [0.0; 3];
        for (p, s) in position.iter_mut().zip(&parts[1..]) {
            *p = s.parse().map_err(|_| {
                Error::Format(format!("coordinates line {}: bad number {s:?}", lineno + 1))
            })?;
        }
        out.push(Electrode {
            name: parts[0].to_string(),
            position,
        });
    }
    Ok(out)
}

pub fn read_coordinates(path: &Path) -> Result<Vec<Electrode>> {
    parse_coordinates(&std::fs::read_to_string(path)?)
}

/// Positions ordered like `channels`.
pub fn positions_for(electrodes: &[Electrode], channels: &[String]) -> Result<Vec<[f64; 3]>> {
    channels
        .iter()
        .map(|c| {
            electrodes
                .iter()
                .find(|e| &e.name == c)
                .map(|e| e.position)
                .ok_or_else(|| Error::Parameter(format!("no coordinates for channel {c}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_orders() {
        let e = parse_coordinates("# montage\nCz 0 0 1\nFz 0 0.7 0.7\n\n").unwrap();
        assert_eq!(e.len(), 2);
        let p = positions_for(&e, &["Fz".into(), "Cz".into()]).unwrap();
        assert_eq!(p, vec![[0., 0.7, 0.7], [0., 0., 1.]]);
        assert!(positions_for(&e, &["Oz".into()]).is_err());
        assert!(matches!(parse_coordinates("Cz 0 0"), Err(Error::Format(_))));
    }
}
