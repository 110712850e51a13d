//! Runtime values flowing through feature programs.

use std::fmt;
use std::sync::Arc;

/// The kind of a value, used by the type checker and registry signatures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Scalar,
    Grid,
    Mask,
    Bool,
    /// The observation-input handle (the single function parameter).
    Input,
    /// A string literal argument, e.g. a concept or field name.
    Text,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Kind::Scalar => "Scalar",
            Kind::Grid => "Grid",
            Kind::Mask => "Mask",
            Kind::Bool => "Bool",
            Kind::Input => "Input",
            Kind::Text => "Text",
        };
        f.write_str(s)
    }
}

/// Dense real-valued raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    inner: Arc<GridData>,
}

#[derive(Debug, PartialEq)]
struct GridData {
    width: u32,
    height: u32,
    cells: Vec<f64>,
}

impl Grid {
    pub fn new(width: u32, height: u32, cells: Vec<f64>) -> Self {
        assert!(width > 0 && height > 0, "grid dimensions must be positive");
        assert_eq!(cells.len(), (width as usize) * (height as usize));
        Grid {
            inner: Arc::new(GridData {
                width,
                height,
                cells,
            }),
        }
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Grid::new(width, height, vec![value; (width as usize) * (height as usize)])
    }

    pub fn width(&self) -> u32 {
        self.inner.width
    }

    pub fn height(&self) -> u32 {
        self.inner.height
    }

    pub fn cells(&self) -> &[f64] {
        &self.inner.cells
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.inner.cells[(y as usize) * (self.inner.width as usize) + x as usize]
    }

    pub fn len(&self) -> usize {
        self.inner.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Binary raster; cells are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    inner: Arc<MaskData>,
}

#[derive(Debug, PartialEq)]
struct MaskData {
    width: u32,
    height: u32,
    cells: Vec<u8>,
}

impl Mask {
    pub fn new(width: u32, height: u32, cells: Vec<u8>) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        assert_eq!(cells.len(), (width as usize) * (height as usize));
        debug_assert!(cells.iter().all(|&c| c == 0 || c == 1));
        Mask {
            inner: Arc::new(MaskData {
                width,
                height,
                cells,
            }),
        }
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        assert!(value <= 1);
        Mask::new(width, height, vec![value; (width as usize) * (height as usize)])
    }

    pub fn width(&self) -> u32 {
        self.inner.width
    }

    pub fn height(&self) -> u32 {
        self.inner.height
    }

    pub fn cells(&self) -> &[u8] {
        &self.inner.cells
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.inner.cells[(y as usize) * (self.inner.width as usize) + x as usize]
    }

    pub fn count_ones(&self) -> usize {
        self.inner.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn len(&self) -> usize {
        self.inner.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A runtime value produced while evaluating a program.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Scalar(f64),
    Grid(Grid),
    Mask(Mask),
    Bool(bool),
    /// The observation handle bound to the program's parameter.
    Input(Arc<super::InputDescriptor>),
    Text(Arc<str>),
}

impl Value {
    pub fn kind(&self) -> Kind {
        match self {
            Value::Scalar(_) => Kind::Scalar,
            Value::Grid(_) => Kind::Grid,
            Value::Mask(_) => Kind::Mask,
            Value::Bool(_) => Kind::Bool,
            Value::Input(_) => Kind::Input,
            Value::Text(_) => Kind::Text,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_grid(&self) -> Option<&Grid> {
        match self {
            Value::Grid(g) => Some(g),
            _ => None,
        }
    }

    pub fn as_mask(&self) -> Option<&Mask> {
        match self {
            Value::Mask(m) => Some(m),
            _ => None,
        }
    }

    /// Approximate heap footprint, used for the cache memory cap.
    pub fn approx_bytes(&self) -> usize {
        match self {
            Value::Scalar(_) | Value::Bool(_) => 16,
            Value::Grid(g) => g.len() * 8 + 32,
            Value::Mask(m) => m.len() + 32,
            Value::Input(_) => 64,
            Value::Text(s) => s.len() + 32,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_accessors() {
        let g = Grid::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(g.get(2, 1), 5.0);
        assert_eq!(g.width(), 3);
        assert_eq!(g.height(), 2);
    }

    #[test]
    fn mask_counts() {
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]);
        assert_eq!(m.count_ones(), 2);
        assert_eq!(m.get(1, 1), 1);
    }

    #[test]
    #[should_panic]
    fn zero_sized_grid_rejected() {
        let _ = Grid::new(0, 4, vec![]);
    }
}
