// Default class colors and icons; unknown classes get the fallback style.

export interface ClassStyle {
  color: string;
  icon: string;
}

export const FALLBACK_STYLE: ClassStyle = { color: "#9e9e9e", icon: "?" };

export const CLASS_STYLES: Record<string, ClassStyle> = {
  advertising_column: { color: "#8e24aa", icon: "AD" },
  bicycle_path: { color: "#7cb342", icon: "BP" },
  building: { color: "#5d4037", icon: "BU" },
  bus: { color: "#f4511e", icon: "BS" },
  bridge: { color: "#6d4c41", icon: "BR" },
  ferry: { color: "#0288d1", icon: "FE" },
  high_voltage_pylon: { color: "#455a64", icon: "HV" },
  lamppost: { color: "#fdd835", icon: "LP" },
  park: { color: "#2e7d32", icon: "PK" },
  playground: { color: "#ef6c00", icon: "PG" },
  public_toilet: { color: "#00897b", icon: "PT" },
  public_transport_stop: { color: "#3949ab", icon: "ST" },
  railway_track: { color: "#757575", icon: "RT" },
  sport_facility: { color: "#c0ca33", icon: "SF" },
  traffic_light: { color: "#e53935", icon: "TL" },
  traffic_sign: { color: "#d81b60", icon: "TS" },
  train: { color: "#512da8", icon: "TR" },
  tram: { color: "#1e88e5", icon: "TM" },
  trash_container: { color: "#6d6d6d", icon: "TC" },
  tree: { color: "#43a047", icon: "T" },
  waterway: { color: "#039be5", icon: "WW" },
  windturbine: { color: "#90a4ae", icon: "WT" },
};

export function styleFor(cls: string): ClassStyle {
  return CLASS_STYLES[cls] ?? FALLBACK_STYLE;
}
