"""
Cell complex with circumcentric dual measures.

A mesh holds a flat 2D or 3D cell complex:

    vertices -- (n_v, dim) coordinates in meters
    edges    -- (n_e, 2) vertex indices, oriented low index -> high index
    faces    -- vertex cycles (triangles and/or cyclic quadrilaterals)
    cells    -- 3D only: tetrahedra and/or boxes, stored as vertex lists

together with the incidence matrices

    d0 -- (n_e, n_v)  signed vertex->edge incidence (discrete gradient)
    d1 -- (n_f, n_e)  signed edge->face incidence  (discrete curl)

so that d1 @ d0 == 0 exactly (integer arithmetic), and the circumcentric
dual measures.  Every primal element has a dual element on the circumcentric
dual complex; on the domain boundary the dual is truncated by auxiliary
nodes (edge midpoints and face circumcenters lying in the boundary).

Signed dual measures are computed from two families of signed orthogonal
distances:

    a[e,f] -- in-plane distance from the midpoint of edge e to the
              circumcenter of an incident face f, positive toward the
              interior of f,
    b[f,c] -- distance from the circumcenter of face f to the circumcenter
              of an incident cell c along the face normal, positive toward
              the interior of c.

Because circumcenters project orthogonally onto each other, every dual
measure is a sum of products of these distances:

    2D:  dual_edge_len[e]    = sum_f a[e,f]
         dual_vertex_area[v] = sum_{e,f}  (|e|/2) a[e,f] / 2
    3D:  dual_face_len[f]    = sum_c b[f,c]
         dual_edge_area[e]   = sum_{f,c}  a[e,f] b[f,c] / 2

The per-cell (2D: per-face) portions of each dual measure are kept as well;
material averaging needs them.  Negative entries are legal (non-well-centered
elements) but are counted, and builders reject meshes where the negative
fraction exceeds a configurable threshold.

Extra edges not contained in any face ("protruding" edges used by open
boundary treatments) are allowed; their dual measures are zero and they
never appear in d1.
"""

import hashlib

import numpy as np
import scipy.sparse as sp

# Fraction of signed dual-measure contributions that may be negative before
# a builder refuses the mesh (see `Mesh.dual_diagnostics`).
DEFAULT_MAX_NEGATIVE_FRACTION = 0.01


def circumcenters(points):
    """Circumcenters of a batch of elements, by least squares.

    points: (n, m, dim) array, n elements with m vertices each.
    Returns (centers, max_radius_spread):
        centers: (n, dim)
        max_radius_spread: worst-case relative spread of vertex distances
            from the computed center (0 for exactly cyclic elements).

    Solving 2 (v_i - v_0) . x = |v_i|^2 - |v_0|^2 in the least-squares sense
    reproduces the exact circumcenter whenever one exists (simplices, cyclic
    polygons, rectangular boxes) and degrades gracefully otherwise.
    """
    points = np.asarray(points, dtype=float)
    n, m, dim = points.shape
    rel = points[:, 1:, :] - points[:, :1, :]                    # (n, m-1, dim)
    rhs = 0.5 * (np.einsum("ijk,ijk->ij", points[:, 1:, :], points[:, 1:, :])
                 - np.einsum("ik,ik->i", points[:, 0, :], points[:, 0, :])[:, None])
    # Normal equations per element: (rel^T rel) x = rel^T rhs
    ata = np.einsum("ijk,ijl->ikl", rel, rel)                    # (n, dim, dim)
    atb = np.einsum("ijk,ij->ik", rel, rhs)                      # (n, dim)
    centers = np.linalg.solve(ata, atb)
    dists = np.linalg.norm(points - centers[:, None, :], axis=2)
    spread = (dists.max(axis=1) - dists.min(axis=1)) / np.maximum(dists.mean(axis=1), 1e-300)
    return centers, float(spread.max()) if n else 0.0


def _polygon_area_normal(cycles, vertices):
    """Area and unit normal of planar polygon batches.

    cycles: (n, m) vertex-index array (no padding within a batch).
    Returns (area (n,), normal (n, 3)) -- for 2D meshes the implied normal
    is +z and only the area is meaningful.
    """
    pts = vertices[cycles]                                       # (n, m, dim)
    if vertices.shape[1] == 2:
        pts3 = np.concatenate([pts, np.zeros(pts.shape[:2] + (1,))], axis=2)
    else:
        pts3 = pts
    center = pts3.mean(axis=1, keepdims=True)
    rel = pts3 - center
    rolled = np.roll(rel, -1, axis=1)
    cross = np.cross(rel, rolled).sum(axis=1)                    # (n, 3)
    norm = np.linalg.norm(cross, axis=1)
    area = 0.5 * norm
    normal = cross / np.maximum(norm, 1e-300)[:, None]
    return area, normal


class Mesh:
    """Flat simplicial / box / polar cell complex with circumcentric duals.

    Construct via the builders in `decmodes.mesh.builders` or the readers in
    `decmodes.mesh.io`; direct construction takes

        vertices     : (n_v, dim) float array, meters
        elements     : list of int sequences.
            dim == 2 -> the faces (tri/quad vertex cycles); they are the cells.
            dim == 3 -> the cells (4 = tet, 8 = box in VTK corner order).
        extra_edges  : optional (k, 2) vertex pairs to append as edges that
                       belong to no face (protruding edges).
        cell_regions : optional (n_cells,) int region ids (default all 0).
    """

    def __init__(self, vertices, elements, extra_edges=None, cell_regions=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.n_vertices, self.dim = self.vertices.shape
        if self.dim not in (2, 3):
            raise ValueError(f"mesh dimension must be 2 or 3, got {self.dim}")

        elements = [np.asarray(el, dtype=np.int64) for el in elements]
        if not elements:
            raise ValueError("mesh needs at least one cell")

        if self.dim == 2:
            self._init_faces_2d(elements)
        else:
            self._init_cells_3d(elements)

        self._init_edges(extra_edges)
        self._init_incidence()
        self._init_primal_measures()
        self._init_dual_measures()
        self._init_boundary()

        n_cells = len(self.cells) if self.dim == 3 else len(self.faces)
        if cell_regions is None:
            self.cell_regions = np.zeros(n_cells, dtype=np.int64)
        else:
            self.cell_regions = np.asarray(cell_regions, dtype=np.int64).copy()
            if self.cell_regions.shape != (n_cells,):
                raise ValueError("cell_regions length does not match cell count")

    # ------------------------------------------------------------------
    # topology
    # ------------------------------------------------------------------

    def _init_faces_2d(self, elements):
        self.cells = None
        self.faces = elements                       # list of cycles (3 or 4 long)
        self.face_cells = None                      # 2D: faces are the cells

    def _init_cells_3d(self, elements):
        self.cells = elements
        face_key_to_index = {}
        faces = []
        face_cell_pairs = []                        # (face index, cell index)
        for ci, cell in enumerate(elements):
            if len(cell) == 4:
                a, b, c, d = cell
                cell_faces = [(a, b, c), (a, b, d), (a, c, d), (b, c, d)]
            elif len(cell) == 8:
                # VTK box corner order: bottom 0-1-2-3 counterclockwise, top 4-5-6-7.
                v = cell
                cell_faces = [
                    (v[0], v[1], v[2], v[3]),       # bottom
                    (v[4], v[5], v[6], v[7]),       # top
                    (v[0], v[1], v[5], v[4]),
                    (v[1], v[2], v[6], v[5]),
                    (v[2], v[3], v[7], v[6]),
                    (v[3], v[0], v[4], v[7]),
                ]
            else:
                raise ValueError(f"3D cells must have 4 or 8 vertices, got {len(cell)}")
            for cyc in cell_faces:
                key = tuple(sorted(cyc))
                idx = face_key_to_index.get(key)
                if idx is None:
                    idx = len(faces)
                    face_key_to_index[key] = idx
                    faces.append(np.asarray(cyc, dtype=np.int64))
                face_cell_pairs.append((idx, ci))
        self.faces = faces
        self.face_cells = np.asarray(face_cell_pairs, dtype=np.int64)

    def _init_edges(self, extra_edges):
        pairs = []
        for cyc in self.faces:
            shifted = np.roll(cyc, -1)
            pairs.append(np.stack([cyc, shifted], axis=1))
        pairs = np.concatenate(pairs, axis=0)
        pairs.sort(axis=1)                          # canonical low -> high
        face_edges = np.unique(pairs, axis=0)
        if extra_edges is not None and len(extra_edges):
            extra = np.asarray(extra_edges, dtype=np.int64).reshape(-1, 2).copy()
            extra.sort(axis=1)
            existing = {tuple(e) for e in face_edges}
            fresh = [e for e in extra if tuple(e) not in existing]
            if fresh:
                self.edges = np.concatenate([face_edges, np.asarray(fresh)], axis=0)
            else:
                self.edges = face_edges
            self.n_protruding = len(fresh)
        else:
            self.edges = face_edges
            self.n_protruding = 0
        self.n_edges = len(self.edges)
        self.n_faces = len(self.faces)
        self._edge_index = {(int(a), int(b)): i for i, (a, b) in enumerate(self.edges)}

    def edge_id(self, v0, v1):
        """Edge index for the vertex pair (v0, v1) in either order."""
        key = (v0, v1) if v0 < v1 else (v1, v0)
        return self._edge_index[key]

    def _init_incidence(self):
        lo = self.edges[:, 0]
        hi = self.edges[:, 1]
        rows = np.repeat(np.arange(self.n_edges), 2)
        cols = np.stack([lo, hi], axis=1).ravel()
        vals = np.tile(np.array([-1.0, 1.0]), self.n_edges)
        self.d0 = sp.csr_matrix((vals, (rows, cols)),
                                shape=(self.n_edges, self.n_vertices))

        rows, cols, vals = [], [], []
        face_edge_lists = []
        for fi, cyc in enumerate(self.faces):
            ids = []
            for k in range(len(cyc)):
                v0, v1 = int(cyc[k]), int(cyc[(k + 1) % len(cyc)])
                ei = self.edge_id(v0, v1)
                sign = 1.0 if v0 < v1 else -1.0
                rows.append(fi)
                cols.append(ei)
                vals.append(sign)
                ids.append(ei)
            face_edge_lists.append(np.asarray(ids, dtype=np.int64))
        self.d1 = sp.csr_matrix((vals, (rows, cols)),
                                shape=(self.n_faces, self.n_edges))
        self.face_edges = face_edge_lists

    # ------------------------------------------------------------------
    # primal measures and circumcenters
    # ------------------------------------------------------------------

    def _faces_by_size(self):
        sizes = np.array([len(c) for c in self.faces])
        for m in np.unique(sizes):
            idx = np.flatnonzero(sizes == m)
            yield idx, np.stack([self.faces[i] for i in idx], axis=0)

    def _cells_by_size(self):
        sizes = np.array([len(c) for c in self.cells])
        for m in np.unique(sizes):
            idx = np.flatnonzero(sizes == m)
            yield idx, np.stack([self.cells[i] for i in idx], axis=0)

    def _init_primal_measures(self):
        vec = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        self.edge_lengths = np.linalg.norm(vec, axis=1)
        if np.any(self.edge_lengths <= 0):
            raise ValueError("mesh contains a zero-length edge")
        self.edge_midpoints = 0.5 * (self.vertices[self.edges[:, 1]]
                                     + self.vertices[self.edges[:, 0]])
        self.edge_tangents = vec / self.edge_lengths[:, None]

        self.face_areas = np.empty(self.n_faces)
        self.face_normals = np.empty((self.n_faces, 3))
        self.face_circumcenters = np.empty((self.n_faces, self.dim))
        self.face_centroids = np.empty((self.n_faces, self.dim))
        self.circum_spread = 0.0
        for idx, cycles in self._faces_by_size():
            area, normal = _polygon_area_normal(cycles, self.vertices)
            self.face_areas[idx] = area
            self.face_normals[idx] = normal
            centers, spread = circumcenters(self.vertices[cycles])
            self.face_circumcenters[idx] = centers
            self.face_centroids[idx] = self.vertices[cycles].mean(axis=1)
            self.circum_spread = max(self.circum_spread, spread)
        if np.any(self.face_areas <= 0):
            raise ValueError("mesh contains a degenerate (zero-area) face")

        if self.dim == 3:
            self.cell_circumcenters = np.empty((len(self.cells), 3))
            self.cell_centroids = np.empty((len(self.cells), 3))
            self.cell_volumes = np.empty(len(self.cells))
            for idx, verts in self._cells_by_size():
                pts = self.vertices[verts]
                centers, spread = circumcenters(pts)
                self.cell_circumcenters[idx] = centers
                self.cell_centroids[idx] = pts.mean(axis=1)
                self.circum_spread = max(self.circum_spread, spread)
                if verts.shape[1] == 4:
                    a = pts[:, 1] - pts[:, 0]
                    b = pts[:, 2] - pts[:, 0]
                    c = pts[:, 3] - pts[:, 0]
                    self.cell_volumes[idx] = np.abs(np.einsum(
                        "ij,ij->i", a, np.cross(b, c))) / 6.0
                else:
                    ext = pts.max(axis=1) - pts.min(axis=1)
                    self.cell_volumes[idx] = np.prod(ext, axis=1)

    # ------------------------------------------------------------------
    # signed circumcentric dual measures
    # ------------------------------------------------------------------

    def _edge_face_distances(self):
        """Flattened (edge, face) incidences with signed distance a[e,f]."""
        ef_edge, ef_face = [], []
        for fi, ids in enumerate(self.face_edges):
            ef_edge.append(ids)
            ef_face.append(np.full(len(ids), fi, dtype=np.int64))
        ef_edge = np.concatenate(ef_edge)
        ef_face = np.concatenate(ef_face)

        mid = self.edge_midpoints[ef_edge]
        tan = self.edge_tangents[ef_edge]
        if self.dim == 2:
            # in-plane normal of the edge
            normal = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
        else:
            fn = self.face_normals[ef_face]
            normal = np.cross(fn, tan)
        # orient toward the face interior (centroid side)
        toward = self.face_centroids[ef_face] - mid
        sign = np.sign(np.einsum("ij,ij->i", toward, normal))
        sign[sign == 0] = 1.0
        normal *= sign[:, None]
        a = np.einsum("ij,ij->i", self.face_circumcenters[ef_face] - mid, normal)
        return ef_edge, ef_face, a

    def _face_cell_distances(self):
        """Flattened (face, cell) incidences with signed distance b[f,c]."""
        fc_face = self.face_cells[:, 0]
        fc_cell = self.face_cells[:, 1]
        normal = self.face_normals[fc_face].copy()
        toward = self.cell_centroids[fc_cell] - self.face_circumcenters[fc_face]
        sign = np.sign(np.einsum("ij,ij->i", toward, normal))
        sign[sign == 0] = 1.0
        normal *= sign[:, None]
        b = np.einsum("ij,ij->i",
                      self.cell_circumcenters[fc_cell] - self.face_circumcenters[fc_face],
                      normal)
        return fc_face, fc_cell, b

    def _init_dual_measures(self):
        ef_edge, ef_face, a = self._edge_face_distances()
        self.ef_edge, self.ef_face, self.ef_dist = ef_edge, ef_face, a

        if self.dim == 2:
            # dual of an edge = broken segment through the face circumcenters
            self.edge_duals = np.zeros(self.n_edges)
            np.add.at(self.edge_duals, ef_edge, a)
            self.face_duals = np.ones(self.n_faces)     # dual vertex, measure 1
            # vertex dual areas, with per-face portions for material averaging
            lo, hi = self.edges[ef_edge, 0], self.edges[ef_edge, 1]
            wedge = 0.5 * (0.5 * self.edge_lengths[ef_edge]) * a
            self.vertex_duals = np.zeros(self.n_vertices)
            np.add.at(self.vertex_duals, lo, wedge)
            np.add.at(self.vertex_duals, hi, wedge)
            vf_vertex = np.concatenate([lo, hi])
            vf_face = np.concatenate([ef_face, ef_face])
            vf_w = np.concatenate([wedge, wedge])
            self.vertex_cell_portions = (vf_vertex, vf_face, vf_w)
            # per-(edge, cell=face) portions of the edge dual
            self.edge_cell_portions = (ef_edge, ef_face, a.copy())
            self._negative_counts = (int(np.sum(a < 0)), int(len(a)))
        else:
            fc_face, fc_cell, b = self._face_cell_distances()
            self.fc_face, self.fc_cell, self.fc_dist = fc_face, fc_cell, b
            self.face_duals = np.zeros(self.n_faces)
            np.add.at(self.face_duals, fc_face, b)

            # pair every (e,f) incidence with every (f,c) incidence of the
            # same face: wedge area = a[e,f] * b[f,c] / 2
            order = np.argsort(ef_face, kind="stable")
            ef_edge_s, ef_face_s, a_s = ef_edge[order], ef_face[order], a[order]
            face_ptr_ef = np.searchsorted(ef_face_s, np.arange(self.n_faces + 1))
            order = np.argsort(fc_face, kind="stable")
            fc_face_s, fc_cell_s, b_s = fc_face[order], fc_cell[order], b[order]
            face_ptr_fc = np.searchsorted(fc_face_s, np.arange(self.n_faces + 1))

            counts_ef = np.diff(face_ptr_ef)
            counts_fc = np.diff(face_ptr_fc)
            # expand: for each face, all (edge-incidence, cell-incidence) pairs
            rep_ef = np.repeat(np.arange(len(ef_face_s)),
                               counts_fc[ef_face_s])
            # index of the first fc entry for the face of each repeated ef row
            base = face_ptr_fc[ef_face_s]
            offs = np.concatenate([np.arange(n) for n in counts_fc[ef_face_s]]) \
                if len(ef_face_s) else np.empty(0, dtype=np.int64)
            rep_fc = np.repeat(base, counts_fc[ef_face_s]) + offs

            wedge = 0.5 * a_s[rep_ef] * b_s[rep_fc]
            we = ef_edge_s[rep_ef]
            wc = fc_cell_s[rep_fc]
            self.edge_duals = np.zeros(self.n_edges)
            np.add.at(self.edge_duals, we, wedge)
            self.edge_cell_portions = (we, wc, wedge)
            self._negative_counts = (int(np.sum(wedge < 0) + np.sum(b < 0)),
                                     int(len(wedge) + len(b)))
            self.vertex_duals = None
            self.vertex_cell_portions = None

    def dual_diagnostics(self):
        """Summary of signed dual-measure quality.

        Returns a dict with the count and fraction of negative dual
        contributions and the worst circumcenter spread seen during
        construction.  Builders compare `negative_fraction` against their
        threshold and refuse the mesh when it is exceeded.
        """
        neg, total = self._negative_counts
        return {
            "negative_contributions": neg,
            "total_contributions": total,
            "negative_fraction": neg / max(total, 1),
            "min_edge_dual": float(self.edge_duals.min()),
            "min_face_dual": float(self.face_duals.min()),
            "circumcenter_spread": self.circum_spread,
        }

    # ------------------------------------------------------------------
    # boundary classification
    # ------------------------------------------------------------------

    def _init_boundary(self):
        if self.dim == 2:
            face_count = np.zeros(self.n_edges, dtype=np.int64)
            rows = np.concatenate([ids for ids in self.face_edges])
            np.add.at(face_count, rows, 1)
            self.edge_face_count = face_count
            interior_edge_ids = set()
            boundary = np.flatnonzero(face_count == 1)
            self.boundary_edges = boundary
            self.boundary_faces = None
        else:
            cell_count = np.zeros(self.n_faces, dtype=np.int64)
            np.add.at(cell_count, self.face_cells[:, 0], 1)
            self.face_cell_count = cell_count
            self.boundary_faces = np.flatnonzero(cell_count == 1)
            on_boundary = np.zeros(self.n_edges, dtype=bool)
            for fi in self.boundary_faces:
                on_boundary[self.face_edges[fi]] = True
            self.boundary_edges = np.flatnonzero(on_boundary)
            face_count = np.zeros(self.n_edges, dtype=np.int64)
            rows = np.concatenate([ids for ids in self.face_edges])
            np.add.at(face_count, rows, 1)
            self.edge_face_count = face_count

        bv = np.zeros(self.n_vertices, dtype=bool)
        if self.dim == 2:
            bv[self.edges[self.boundary_edges].ravel()] = True
        else:
            for fi in self.boundary_faces:
                bv[self.faces[fi]] = True
        self.boundary_vertices = np.flatnonzero(bv)

        if self.n_protruding:
            self.protruding_edges = np.arange(self.n_edges - self.n_protruding,
                                              self.n_edges)
        else:
            self.protruding_edges = np.empty(0, dtype=np.int64)

    # ------------------------------------------------------------------
    # utilities
    # ------------------------------------------------------------------

    def rescaled(self, scale):
        """Copy of the mesh with all coordinates multiplied by `scale`.

        Dual and primal measures are rescaled analytically (lengths x s,
        areas x s^2, volumes x s^3) -- no topology is recomputed.
        """
        import copy
        out = copy.copy(self)
        s = float(scale)
        out.vertices = self.vertices * s
        out.edge_lengths = self.edge_lengths * s
        out.edge_midpoints = self.edge_midpoints * s
        out.face_areas = self.face_areas * s ** 2
        out.face_circumcenters = self.face_circumcenters * s
        out.face_centroids = self.face_centroids * s
        out.ef_dist = self.ef_dist * s
        out.edge_cell_portions = (self.edge_cell_portions[0],
                                  self.edge_cell_portions[1],
                                  self.edge_cell_portions[2] * s ** (self.dim - 1))
        if self.dim == 2:
            out.edge_duals = self.edge_duals * s
            out.vertex_duals = self.vertex_duals * s ** 2
            vv, vf, vw = self.vertex_cell_portions
            out.vertex_cell_portions = (vv, vf, vw * s ** 2)
            out.face_duals = self.face_duals.copy()
        else:
            out.edge_duals = self.edge_duals * s ** 2
            out.face_duals = self.face_duals * s
            out.fc_dist = self.fc_dist * s
            out.cell_circumcenters = self.cell_circumcenters * s
            out.cell_centroids = self.cell_centroids * s
            out.cell_volumes = self.cell_volumes * s ** 3
        return out

    def content_hash(self):
        """Stable hex digest of the mesh geometry, topology and regions."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.edges).tobytes())
        for cyc in self.faces:
            h.update(np.ascontiguousarray(cyc).tobytes())
        if self.cells is not None:
            for cell in self.cells:
                h.update(np.ascontiguousarray(cell).tobytes())
        h.update(np.ascontiguousarray(self.cell_regions).tobytes())
        return h.hexdigest()

    def summary(self):
        n_cells = len(self.cells) if self.dim == 3 else self.n_faces
        return {
            "dim": self.dim,
            "vertices": self.n_vertices,
            "edges": self.n_edges,
            "faces": self.n_faces,
            "cells": n_cells,
            "protruding_edges": int(self.n_protruding),
            "boundary_edges": int(len(self.boundary_edges)),
            "boundary_vertices": int(len(self.boundary_vertices)),
        }
