//! wasm-bindgen bindings for the static page in `www/`.
//!
//! The exported functions take a SMILES string and return JSON or plain
//! text; errors become thrown JS strings.

use moltailor::chem::{self, parse_smiles};
use moltailor::descriptors::compute_all;
use moltailor::model::smiles_pieces;
use wasm_bindgen::prelude::*;

pub fn canonical(smiles: &str) -> Result<String, String> {
    let g = parse_smiles(smiles).map_err(|e| e.to_string())?;
    Ok(chem::canonicalize(&g))
}

/// Descriptor name to value, as a JSON object in registry order.
pub fn descriptor_json(smiles: &str) -> Result<String, String> {
    let g = parse_smiles(smiles).map_err(|e| e.to_string())?;
    let d = compute_all(&g).map_err(|e| e.to_string())?;
    let map: serde_json::Map<String, serde_json::Value> = d.iter().map(|(k, v)| (k.to_string(), v.into())).collect();
    Ok(serde_json::Value::Object(map).to_string())
}

/// Tokens with the atom index each one belongs to (null for bonds,
/// branches and ring digits).
pub fn token_json(smiles: &str) -> Result<String, String> {
    parse_smiles(smiles).map_err(|e| e.to_string())?;
    let tokens: Vec<serde_json::Value> = smiles_pieces(smiles)
        .into_iter()
        .map(|(piece, atom)| serde_json::json!({ "token": piece, "atom": atom }))
        .collect();
    Ok(serde_json::Value::Array(tokens).to_string())
}

#[wasm_bindgen]
pub fn canonicalize(smiles: &str) -> Result<String, JsValue> {
    canonical(smiles).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn descriptors(smiles: &str) -> Result<String, JsValue> {
    descriptor_json(smiles).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn tokenize(smiles: &str) -> Result<String, JsValue> {
    token_json(smiles).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_ignores_atom_order() {
        assert_eq!(canonical("OCC").unwrap(), canonical("C(O)C").unwrap());
        assert!(canonical("C1CC").is_err());
    }

    #[test]
    fn descriptors_are_a_json_object() {
        let v: serde_json::Value = serde_json::from_str(&descriptor_json("c1ccccc1O").unwrap()).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 24);
        assert_eq!(v["RingCount"], 1.0);
    }

    #[test]
    fn tokens_map_to_atoms() {
        let v: serde_json::Value = serde_json::from_str(&token_json("C(=O)Cl").unwrap()).unwrap();
        let toks: Vec<&str> = v.as_array().unwrap().iter().map(|t| t["token"].as_str().unwrap()).collect();
        assert_eq!(toks, ["C", "(", "=", "O", ")", "Cl"]);
        assert_eq!(v[5]["atom"], 2);
        assert!(v[1]["atom"].is_null());
    }
}
