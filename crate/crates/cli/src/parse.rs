use barrier_mpc::{logspace, Vector};

pub fn parse_vector(text: &str) -> Result<Vector, String> {
    let vals: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match vals {
        Ok(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok(Vector::from_vec(v)),
        Ok(_) => Err(format!("'{text}' must be a list of finite numbers")),
        Err(e) => Err(format!("'{text}': {e}")),
    }
}

/// `start:stop:logN` for `N` log-spaced values, or a comma list.
pub fn parse_parameters(text: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let values = match parts.as_slice() {
        [start, stop, count] => {
            let n = count
                .strip_prefix("log")
                .ok_or_else(|| format!("'{count}' should read logN"))?
                .parse::<usize>()
                .map_err(|e| format!("'{count}': {e}"))?;
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("'{s}': {e}"));
            logspace(num(start)?, num(stop)?, n).map_err(|e| e.to_string())?
        }
        [_] => parse_vector(text)?.iter().copied().collect(),
        _ => return Err(format!("'{text}' is neither start:stop:logN nor a comma list")),
    };
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err("parameters must be positive".into());
    }
    Ok(values)
}
