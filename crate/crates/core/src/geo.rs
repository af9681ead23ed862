//! Great-circle geometry on `(lon, lat)` pairs in degrees.

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Mean kilometres per degree of latitude on the sphere used by [`haversine`].
pub const KM_PER_DEGREE: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

/// Point as `(lon, lat)` in degrees.
pub type LonLat = (f64, f64);

/// Great-circle distance in km.
pub fn haversine(a: LonLat, b: LonLat) -> f64 {
    let (lon1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lon2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Point reached by moving `east_km`/`north_km` from `origin` on a local
/// tangent plane. Accurate to well under a percent for offsets of a few
/// hundred kilometres away from the poles.
pub fn offset_km(origin: LonLat, east_km: f64, north_km: f64) -> LonLat {
    let lat = origin.1 + north_km / KM_PER_DEGREE;
    let lon = origin.0 + east_km / (KM_PER_DEGREE * origin.1.to_radians().cos());
    (lon, lat)
}
