"""Write the shipped reference actor and its template mesh."""

from pathlib import Path

from volcap.io import save_model, save_obj
from volcap.reference import build_reference_model

DATA = Path(__file__).resolve().parents[1] / "src" / "volcap" / "data"


def main():
    model = build_reference_model()
    DATA.mkdir(exist_ok=True)
    save_obj(DATA / "reference_mesh.obj", model.mesh_vertices, model.mesh_faces)
    save_model(model, DATA / "reference_model.json", mesh_file="reference_mesh.obj")
    print(f"{model.n_gaussians} Gaussians, {model.skeleton.n_dofs} pose parameters")


if __name__ == "__main__":
    main()
