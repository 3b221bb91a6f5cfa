//! Weight files in the safetensors layout.
//!
//! Parameter names follow the dotted convention used by common vision model
//! zoos (`layer1.0.conv1.weight`), so converted external weights load directly.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{decode_le, DType, Scalar};
use crate::tensor::Tensor;

fn st_dtype(d: DType) -> Dtype {
    match d {
        DType::F32 => Dtype::F32,
        DType::F64 => Dtype::F64,
    }
}

/// Serializes named tensors; output is byte-stable for identical input.
pub fn encode_tensors<T: Scalar>(tensors: &BTreeMap<String, Tensor<T>>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.to_le_bytes()))
        .collect();
    let views = bytes
        .iter()
        .map(|(k, shape, data)| {
            TensorView::new(st_dtype(T::DTYPE), shape.clone(), data)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::tensor::serialize(views, None).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode_tensors<T: Scalar>(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = BTreeMap::new();
    for name in st.names() {
        let view = st.tensor(name).map_err(|e| Error::Format(e.to_string()))?;
        let dtype = match view.dtype() {
            Dtype::F32 => DType::F32,
            Dtype::F64 => DType::F64,
            other => return Err(Error::Format(format!("tensor {name}: unsupported dtype {other:?}"))),
        };
        let values = decode_le::<T>(view.data(), dtype);
        out.insert(name.to_string(), Tensor::from_vec(view.shape(), values)?);
    }
    Ok(out)
}

pub fn store_tensors<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
    store.iter().map(|(k, p)| (k.to_string(), p.value.clone())).collect()
}

pub fn encode_store<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    encode_tensors(&store_tensors(store))
}

/// Overwrites every parameter in `store` from `tensors`. Names present in the
/// store but absent from the file are reported together; extra names in the
/// file are ignored.
pub fn fill_store<T: Scalar>(store: &mut ParamStore<T>, tensors: BTreeMap<String, Tensor<T>>) -> Result<()> {
    let missing: Vec<String> = store
        .names()
        .filter(|n| !tensors.contains_key(*n))
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(8).cloned().collect();
        return Err(Error::Weights(format!(
            "{} parameter(s) missing from weights: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 8 { ", ..." } else { "" }
        )));
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut tensors = tensors;
    for name in names {
        let t = tensors.remove(&name).expect("checked above");
        store.set(&name, t)?;
    }
    Ok(())
}

pub fn load_store_file<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Weights(format!("weight file {} does not exist", path.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode_tensors(&bytes).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
    fill_store(store, tensors)
}

pub fn save_store_file<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode_store(store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
