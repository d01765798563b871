//! Class colors for classification maps and the binary PPM writer.
//!
//! Class `k` (1-based) is drawn with `PALETTE[(k - 1) % 20]`, Kelly's twenty
//! contrasting colors without white and black. Pixels left unpredicted are
//! black.

pub const PALETTE: [[u8; 3]; 20] = [
    [0xF3, 0xC3, 0x00],
    [0x87, 0x56, 0x92],
    [0xF3, 0x84, 0x00],
    [0xA1, 0xCA, 0xF1],
    [0xBE, 0x00, 0x32],
    [0xC2, 0xB2, 0x80],
    [0x84, 0x84, 0x82],
    [0x00, 0x88, 0x56],
    [0xE6, 0x8F, 0xAC],
    [0x00, 0x67, 0xA5],
    [0xF9, 0x93, 0x79],
    [0x60, 0x4E, 0x97],
    [0xF6, 0xA6, 0x00],
    [0xB3, 0x44, 0x6C],
    [0xDC, 0xD3, 0x00],
    [0x88, 0x2D, 0x17],
    [0x8D, 0xB6, 0x00],
    [0x65, 0x45, 0x22],
    [0xE2, 0x58, 0x22],
    [0x2B, 0x3D, 0x26],
];

pub const UNPREDICTED: [u8; 3] = [0, 0, 0];

/// Color of a 1-based class; class 0 means no prediction.
pub fn color(class: usize) -> [u8; 3] {
    match class {
        0 => UNPREDICTED,
        k => PALETTE[(k - 1) % PALETTE.len()],
    }
}

/// Binary PPM (P6) of a row-major class map.
pub fn encode_ppm(height: usize, width: usize, classes: &[usize]) -> Vec<u8> {
    assert_eq!(classes.len(), height * width, "class map size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(classes.len() * 3);
    for &k in classes {
        out.extend_from_slice(&color(k));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_are_distinct_and_not_black() {
        for (i, a) in PALETTE.iter().enumerate() {
            assert_ne!(*a, UNPREDICTED);
            assert!(PALETTE[i + 1..].iter().all(|b| b != a));
        }
        assert_eq!(color(21), color(1));
    }

    #[test]
    fn ppm_layout() {
        let ppm = encode_ppm(1, 2, &[0, 2]);
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(&ppm[header.len()..], &[0, 0, 0, 0x87, 0x56, 0x92]);
    }
}
