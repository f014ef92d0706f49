//! Named parameter arrays: iteration for optimizers, checkpoints and freeze checks.

use ndarray::{Array1, Array2};

/// Read-only view of one named parameter array.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>);

    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Little-endian bytes of every array in visiting order; used for freeze checks.
    fn to_bytes(&self) -> Vec<u8> {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    fn fill(&mut self, value: f64) {
        for p in self.params_mut() {
            p.data.fill(value);
        }
    }

    /// Rounds every value to the nearest `f32`, so float32 checkpoints are lossless.
    fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            for v in p.data.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push_matrix<'a>(out: &mut Vec<ParamRef<'a>>, name: String, m: &'a Array2<f64>) {
    out.push(ParamRef {
        name,
        shape: m.shape().to_vec(),
        data: m.as_slice().expect("standard layout"),
    });
}

pub(crate) fn push_matrix_mut<'a>(
    out: &mut Vec<ParamMut<'a>>,
    name: String,
    m: &'a mut Array2<f64>,
) {
    out.push(ParamMut {
        name,
        shape: m.shape().to_vec(),
        data: m.as_slice_mut().expect("standard layout"),
    });
}

pub(crate) fn push_vector<'a>(out: &mut Vec<ParamRef<'a>>, name: String, v: &'a Array1<f64>) {
    out.push(ParamRef {
        name,
        shape: vec![v.len()],
        data: v.as_slice().expect("standard layout"),
    });
}

pub(crate) fn push_vector_mut<'a>(
    out: &mut Vec<ParamMut<'a>>,
    name: String,
    v: &'a mut Array1<f64>,
) {
    out.push(ParamMut {
        name,
        shape: vec![v.len()],
        data: v.as_slice_mut().expect("standard layout"),
    });
}
